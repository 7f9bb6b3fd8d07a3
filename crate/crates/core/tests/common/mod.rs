#![allow(dead_code)]

use rethink_core::policy::{FeatureMap, Features, PolicyParams};
use rethink_core::rng::RandomStream;
use rethink_core::types::{Query, Split, Token};

/// Dense pseudo-random features keyed on (first context token, last prefix
/// token, position). Every parameter influences some logit.
#[derive(Debug, Clone)]
pub struct RandomFeatures {
    pub dim: usize,
    pub salt: u64,
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    x = (x ^ (x >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

impl FeatureMap for RandomFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, context: &[Token], prefix: &[Token], pos: usize) -> Features {
        let c = context.first().map_or(0, |t| t.0 as u64);
        let p = prefix.last().map_or(999, |t| t.0 as u64);
        let key = mix(self.salt ^ (c << 40) ^ (p << 20) ^ pos as u64);
        (0..self.dim)
            .map(|i| {
                let h = mix(key ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                (i, (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
            })
            .collect()
    }
}

pub fn random_params(vocab: usize, dim: usize, scale: f64, s: &mut RandomStream) -> PolicyParams {
    PolicyParams::from_theta(vocab, (0..vocab * dim).map(|_| (s.uniform() * 2.0 - 1.0) * scale).collect())
}

pub fn query(id: u64, context: Vec<Token>, truth: Vec<Token>, difficulty: f64) -> Query {
    Query {
        id,
        context,
        truth,
        difficulty,
        split: Split::Train,
    }
}
