//! HTTP scorer client against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use pixdec::matcheval::{score_predictions, RemoteScorer, ScoreRequest};
use pixdec::Error;

/// Serves one request with `status` and `body`; hands back the request body.
fn serve_once(status: u16, body: &'static str) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut buf = vec![0; len];
        reader.read_exact(&mut buf).unwrap();
        tx.send(String::from_utf8(buf).unwrap()).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
    });
    (url, rx)
}

fn request() -> ScoreRequest {
    ScoreRequest {
        text: "the cat is [SEG] and the dog is [SEG]".into(),
        num_predictions: 2,
        pairs: vec![("cat".into(), Some("cat".into())), ("dog".into(), Some("puppy".into()))],
    }
}

fn scorer(url: &str) -> RemoteScorer {
    RemoteScorer::new(url, Duration::from_secs(5))
}

#[test]
fn scores_are_normalized() {
    let (url, rx) = serve_once(200, r#"{"scores": [7, 3]}"#);
    let s = score_predictions(&scorer(&url), &request()).unwrap();
    assert_eq!(s, vec![0.7, 0.3]);
    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent["num_predictions"], 2);
    assert_eq!(sent["text"], "the cat is [SEG] and the dog is [SEG]");
}

#[test]
fn http_errors_are_protocol_errors() {
    let (url, _rx) = serve_once(503, "{}");
    assert!(matches!(
        score_predictions(&scorer(&url), &request()),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn malformed_replies_are_protocol_errors() {
    for body in [
        r#"{"score": [1, 2]}"#,
        "not json",
        r#"{"scores": [11, 2]}"#,
        r#"{"scores": [0, 2]}"#,
        r#"{"scores": [4]}"#,
    ] {
        let (url, _rx) = serve_once(200, body);
        let r = score_predictions(&scorer(&url), &request());
        assert!(matches!(r, Err(Error::Protocol(_))), "{body}: {r:?}");
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let r = score_predictions(&scorer(&format!("http://127.0.0.1:{port}/score")), &request());
    assert!(matches!(r, Err(Error::Transport(_))), "{r:?}");
}

#[test]
fn silent_server_times_out_as_transport() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let hold = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_millis(1500));
        drop(s);
    });
    let r = score_predictions(&RemoteScorer::new(url, Duration::from_millis(300)), &request());
    assert!(matches!(r, Err(Error::Transport(_))), "{r:?}");
    hold.join().unwrap();
}
