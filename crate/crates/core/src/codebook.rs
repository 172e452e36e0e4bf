//! The segmentation codebook: `N_cb` learnable tokens for each of `L` scale
//! groups, and the affine fusion that collapses a group's hidden states into
//! one embedding per scale.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bindings, Linear, ParamId, ParamStore};
use crate::numeric::{Scalar, Tape, Var};

pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct SegCodebook {
    levels: usize,
    tokens_per_level: usize,
    d: usize,
    /// `tokens[l][n]`
    tokens: Vec<Vec<ParamId>>,
    fusion: Linear,
}

impl SegCodebook {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        levels: usize,
        tokens_per_level: usize,
        d: usize,
    ) -> Result<Self> {
        if levels == 0 || tokens_per_level == 0 || d == 0 {
            return Err(Error::Contract(format!(
                "codebook needs positive sizes, got L={levels} N_cb={tokens_per_level} d={d}"
            )));
        }
        let mut tokens = Vec::with_capacity(levels);
        for l in 0..levels {
            let group = (0..tokens_per_level)
                .map(|n| {
                    store.insert(
                        format!("codebook.token.{l}.{n}"),
                        normal_tensor(rng, &[d], TOKEN_INIT_STD),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            tokens.push(group);
        }
        let fusion = Linear::new(store, rng, "codebook.fusion", tokens_per_level * d, d)?;
        Ok(SegCodebook {
            levels,
            tokens_per_level,
            d,
            tokens,
            fusion,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn tokens_per_level(&self) -> usize {
        self.tokens_per_level
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn token(&self, level: usize, n: usize) -> ParamId {
        self.tokens[level][n]
    }

    pub fn fusion(&self) -> &Linear {
        &self.fusion
    }

    /// Every trainable parameter of the codebook, tokens first (group-major),
    /// then the fusion weight and bias.
    pub fn codebook_params<'a, S: Scalar>(&self, store: &'a ParamStore<S>) -> Vec<(&'a str, ParamId)> {
        self.tokens
            .iter()
            .flatten()
            .copied()
            .chain([self.fusion.weight, self.fusion.bias])
            .map(|id| (store.name(id), id))
            .collect()
    }

    /// All tokens concatenated into one `(L·N_cb·d)` vector.
    pub fn flat_tokens<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings) -> Result<Var> {
        let vars: Vec<Var> = self.tokens.iter().flatten().map(|&id| bind[id]).collect();
        tape.concat(&vars, 0)
    }

    /// `(N_cb, d)` hidden states of one group → `(d)`.
    pub fn fuse_tokens<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings, group: Var) -> Result<Var> {
        if tape.shape(group) != [self.tokens_per_level, self.d] {
            return Err(Error::dim(
                "fuse_tokens",
                format!(
                    "group has shape {:?}, expected [{}, {}]",
                    tape.shape(group),
                    self.tokens_per_level,
                    self.d
                ),
            ));
        }
        let row = tape.reshape(group, &[1, self.tokens_per_level * self.d])?;
        let out = self.fusion.forward(tape, bind, row)?;
        tape.reshape(out, &[self.d])
    }

    /// `(K, L, N_cb, d)` → `(K, L, d)`, fusing every group at once.
    pub fn fuse_all<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings, hidden: Var) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        if shape.len() != 4 || shape[1..] != [self.levels, self.tokens_per_level, self.d] {
            return Err(Error::dim(
                "fuse_all",
                format!(
                    "hidden states {shape:?}, expected [K, {}, {}, {}]",
                    self.levels, self.tokens_per_level, self.d
                ),
            ));
        }
        let k = shape[0];
        let rows = tape.reshape(hidden, &[k * self.levels, self.tokens_per_level * self.d])?;
        let out = self.fusion.forward(tape, bind, rows)?;
        tape.reshape(out, &[k, self.levels, self.d])
    }
}
