//! Trains on synthetic scenes from a JSON run config and prints progress.

use std::io::Write;

use pixdec::train::{prepare_data, train_on, RunConfig};

struct Progress(Vec<u8>);

impl Write for Progress {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.extend_from_slice(buf);
        while let Some(pos) = self.0.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.0.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line);
            if line.contains("\"eval\"") || line.contains("99,\"loss") {
                print!("{line}");
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn main() {
    let path = std::env::args().nth(1).expect("usage: toy_train CONFIG.json");
    let config = RunConfig::load(path.as_ref()).unwrap();
    let (train, val) = prepare_data(&config).unwrap();
    let t = std::time::Instant::now();
    let out = train_on::<f64>(&config, &train, &val, Some(&mut Progress(Vec::new()))).unwrap();
    println!("final {:?} in {:.0}s", out.final_eval, t.elapsed().as_secs_f64());
}
