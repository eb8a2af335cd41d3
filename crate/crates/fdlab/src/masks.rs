//! Sampling, scaling, and bookkeeping of every dropout flavor the
//! training stack uses.
//!
//! All masks use inverted scaling: kept entries are exactly `1/(1-rate)`,
//! dropped entries are 0, so the expected mask is all-ones and the
//! mask-free network is the expected-mask network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hard cap on exhaustively enumerable mask bits (2^20 masks).
pub const ENUM_BIT_BUDGET: usize = 20;

/// How a site's keep decisions are drawn and shared over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Fresh i.i.d. mask every time step.
    PerStep,
    /// One mask reused across all steps of a TBPTT window (variational).
    PerSequence,
    /// Whole vocabulary rows dropped together, sampled per window.
    EmbeddingRow,
    /// Elementwise mask on a weight matrix, sampled per window.
    WeightMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropScheme {
    pub rate: f64,
    pub granularity: Granularity,
}

impl DropScheme {
    pub fn new(rate: f64, granularity: Granularity) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate { rate });
        }
        Ok(DropScheme { rate, granularity })
    }

    /// Value each kept entry carries under inverted scaling.
    pub fn keep_value(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    /// Number of independent Bernoulli bits behind a mask of `shape`.
    pub fn bits(&self, shape: &[usize]) -> usize {
        if self.rate == 0.0 {
            return 0;
        }
        match self.granularity {
            Granularity::EmbeddingRow => shape[0],
            _ => shape.iter().product(),
        }
    }
}

/// Draw one scaled mask. A pure function of `(scheme, shape, rng state)`.
pub fn sample(scheme: &DropScheme, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&scheme.rate) {
        return Err(Error::InvalidRate { rate: scheme.rate });
    }
    if scheme.rate == 0.0 {
        return Ok(Tensor::full(shape.to_vec(), 1.0));
    }
    let keep = scheme.keep_value();
    let mut out = Tensor::zeros(shape.to_vec());
    match scheme.granularity {
        Granularity::EmbeddingRow => {
            let (rows, cols) = (shape[0], shape[1..].iter().product::<usize>());
            for i in 0..rows {
                if rng.gen::<f64>() >= scheme.rate {
                    out.data_mut()[i * cols..(i + 1) * cols].fill(keep);
                }
            }
        }
        _ => {
            for v in out.data_mut() {
                if rng.gen::<f64>() >= scheme.rate {
                    *v = keep;
                }
            }
        }
    }
    Ok(out)
}

/// Expectation of the inverted-scaled mask: all-ones for any rate < 1.
pub fn expected_mask(scheme: &DropScheme, shape: &[usize]) -> Result<Tensor> {
    if !(0.0..1.0).contains(&scheme.rate) {
        return Err(Error::InvalidRate { rate: scheme.rate });
    }
    Ok(Tensor::full(shape.to_vec(), 1.0))
}

/// All 2^k masks for `shape` with exact Bernoulli product probabilities.
///
/// Refuses (rather than truncates) when the bit count exceeds the budget.
pub fn enumerate_all(scheme: &DropScheme, shape: &[usize]) -> Result<Vec<(Tensor, f64)>> {
    if !(0.0..1.0).contains(&scheme.rate) {
        return Err(Error::InvalidRate { rate: scheme.rate });
    }
    let bits = scheme.bits(shape);
    if bits > ENUM_BIT_BUDGET {
        return Err(Error::BitBudget {
            bits,
            budget: ENUM_BIT_BUDGET,
        });
    }
    if bits == 0 {
        return Ok(vec![(Tensor::full(shape.to_vec(), 1.0), 1.0)]);
    }
    let keep = scheme.keep_value();
    let p_keep = 1.0 - scheme.rate;
    let row_expand = matches!(scheme.granularity, Granularity::EmbeddingRow);
    let cols: usize = if row_expand {
        shape[1..].iter().product()
    } else {
        1
    };
    let mut out = Vec::with_capacity(1usize << bits);
    for code in 0..(1u64 << bits) {
        let mut mask = Tensor::zeros(shape.to_vec());
        let mut prob = 1.0;
        for bit in 0..bits {
            let kept = (code >> bit) & 1 == 1;
            prob *= if kept { p_keep } else { scheme.rate };
            if kept {
                if row_expand {
                    mask.data_mut()[bit * cols..(bit + 1) * cols].fill(keep);
                } else {
                    mask.data_mut()[bit] = keep;
                }
            }
        }
        out.push((mask, prob));
    }
    Ok(out)
}

/// Identifies a dropout site within the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteKey {
    pub layer: usize,
    pub site: Site,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    /// Embedded input of layer 0 (word dropout) or inter-layer input.
    Input,
    /// Output of the final layer, applied per step.
    Output,
    /// Whole rows of the embedding matrix.
    Embedding,
    /// Hidden-to-hidden weight matrix (DropConnect).
    WeightHh,
}

impl Site {
    pub fn name(&self) -> &'static str {
        match self {
            Site::Input => "input",
            Site::Output => "output",
            Site::Embedding => "embedding",
            Site::WeightHh => "weight_hh",
        }
    }
}

/// The mask sampled for one site: shared across a window or one per step.
#[derive(Debug, Clone)]
pub enum SiteMask {
    Shared(Tensor),
    PerStep(Vec<Tensor>),
}

impl SiteMask {
    pub fn at_step(&self, t: usize) -> &Tensor {
        match self {
            SiteMask::Shared(m) => m,
            SiteMask::PerStep(ms) => &ms[t],
        }
    }
}

/// The concrete dropout masks for one forward pass, replayable by seed.
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: BTreeMap<SiteKey, SiteMask>,
    seed: u64,
}

impl MaskSet {
    /// Deterministically sample masks for the given sites. `sites` lists
    /// `(key, scheme, shape)`; per-step sites get `steps` fresh draws.
    pub fn sample(
        sites: &[(SiteKey, DropScheme, Vec<usize>)],
        steps: usize,
        seed: u64,
    ) -> Result<MaskSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = BTreeMap::new();
        // BTreeMap ordering of `sites` is the caller's responsibility only
        // insofar as replay uses the same site list order.
        for (key, scheme, shape) in sites {
            let m = match scheme.granularity {
                Granularity::PerStep => {
                    let ms: Result<Vec<Tensor>> =
                        (0..steps).map(|_| sample(scheme, shape, &mut rng)).collect();
                    SiteMask::PerStep(ms?)
                }
                _ => SiteMask::Shared(sample(scheme, shape, &mut rng)?),
            };
            masks.insert(*key, m);
        }
        Ok(MaskSet { masks, seed })
    }

    /// All-ones masks for the same sites (the expected-mask pass).
    pub fn expected(sites: &[(SiteKey, DropScheme, Vec<usize>)]) -> MaskSet {
        let mut masks = BTreeMap::new();
        for (key, scheme, shape) in sites {
            let ones = Tensor::full(shape.clone(), 1.0);
            let m = match scheme.granularity {
                Granularity::PerStep => SiteMask::PerStep(vec![]),
                _ => SiteMask::Shared(ones.clone()),
            };
            // Per-step all-ones masks are identical; store as shared.
            masks.insert(
                *key,
                match m {
                    SiteMask::PerStep(_) => SiteMask::Shared(ones),
                    shared => shared,
                },
            );
        }
        MaskSet { masks, seed: 0 }
    }

    /// Build a MaskSet from explicit masks (used by enumeration).
    pub fn from_masks(entries: Vec<(SiteKey, SiteMask)>, seed: u64) -> MaskSet {
        MaskSet {
            masks: entries.into_iter().collect(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, layer: usize, site: Site) -> Option<&SiteMask> {
        self.masks.get(&SiteKey { layer, site })
    }

    pub fn require(&self, layer: usize, site: Site) -> Result<&SiteMask> {
        self.get(layer, site).ok_or(Error::MissingMask {
            layer,
            site: site.name(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}
