//! Probability maps, embedding costs, change simulators and the
//! syndrome-trellis codec.
//!
//! Sign convention: a pixel is decremented when the noise draw falls below
//! `p_minus` and incremented when it exceeds `1 - p_plus`. The continuous
//! simulator uses the same orientation so the two agree away from the
//! thresholds.

pub mod stc;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{self, GridError};
use crate::image::ImageGray;

pub use stc::{stc_embed, stc_extract, StcCode, StcParams};

/// Reserved cost marking a pixel as unmodifiable.
pub const WET_COST: f64 = 1e13;

/// Default steepness of the double-tanh simulator.
pub const DEFAULT_GAMMA: f64 = 60.0;

pub fn is_wet(cost: f64) -> bool {
    !(cost < WET_COST * (1.0 - 1e-6))
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error("probability out of domain at pixel {index}: {value}")]
    Domain { index: usize, value: f64 },
    #[error("message of {requested} bits exceeds capacity of {capacity} bits")]
    Payload { requested: usize, capacity: usize },
    #[error("no change pattern satisfies the syndrome (too many wet pixels)")]
    Infeasible,
    #[error("invalid codec parameters: {0}")]
    Params(String),
    #[error("invalid cost at pixel {index}: {value}")]
    Cost { index: usize, value: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<(), EmbedError> {
    if a != b {
        return Err(EmbedError::Shape { a, b });
    }
    Ok(())
}

/// Per-pixel probabilities of a `+1` and a `-1` change.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl ProbabilityMap {
    /// Split total change probabilities evenly between both directions.
    pub fn symmetric(height: usize, width: usize, p: &[f64]) -> Result<Self, EmbedError> {
        if p.len() != height * width {
            return Err(EmbedError::Shape {
                a: (height, width),
                b: (p.len(), 1),
            });
        }
        if let Some((index, &value)) = p
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v < 1.0))
        {
            return Err(EmbedError::Domain { index, value });
        }
        let half: Vec<f64> = p.iter().map(|v| v / 2.0).collect();
        Ok(Self {
            height,
            width,
            plus: half.clone(),
            minus: half,
        })
    }

    pub fn from_planes(
        height: usize,
        width: usize,
        plus: Vec<f64>,
        minus: Vec<f64>,
    ) -> Result<Self, EmbedError> {
        if plus.len() != height * width || minus.len() != height * width {
            return Err(EmbedError::Shape {
                a: (height, width),
                b: (plus.len(), minus.len()),
            });
        }
        for (index, (&a, &b)) in plus.iter().zip(&minus).enumerate() {
            if !(a >= 0.0 && b >= 0.0 && a + b < 1.0) {
                return Err(EmbedError::Domain { index, value: a + b });
            }
        }
        Ok(Self {
            height,
            width,
            plus,
            minus,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plus(&self) -> &[f64] {
        &self.plus
    }

    pub fn minus(&self) -> &[f64] {
        &self.minus
    }

    /// Total change probability `p_plus + p_minus`.
    pub fn total(&self) -> Vec<f64> {
        self.plus.iter().zip(&self.minus).map(|(a, b)| a + b).collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.plus
            .iter()
            .zip(&self.minus)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Expected message capacity in bits.
    pub fn capacity(&self) -> f64 {
        capacity(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        if self.max_asymmetry() == 0.0 {
            grid::write(path, self.height, self.width, &[&self.total()])?;
        } else {
            grid::write(path, self.height, self.width, &[&self.plus, &self.minus])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let g = grid::read(path)?;
        match g.planes.len() {
            1 => Self::symmetric(g.height, g.width, &g.planes[0]),
            2 => {
                let mut planes = g.planes.into_iter();
                let plus = planes.next().expect("two planes");
                let minus = planes.next().expect("two planes");
                Self::from_planes(g.height, g.width, plus, minus)
            }
            found => Err(GridError::Planes { expected: 2, found }.into()),
        }
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.log2()
    } else {
        0.0
    }
}

/// Ternary entropy of the map in bits.
pub fn capacity(p: &ProbabilityMap) -> f64 {
    p.plus
        .iter()
        .zip(&p.minus)
        .map(|(&a, &b)| plogp(a) + plogp(b) + plogp(1.0 - a - b))
        .sum()
}

/// Uniform noise on `[0, 1)`, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub r: Vec<f64>,
}

impl NoiseField {
    pub fn generate(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0..height * width).map(|_| rng.random::<f64>()).collect();
        Self {
            height,
            width,
            seed,
            r,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Simulated changes: discrete values in `{-1, 0, 1}` or continuous in
/// `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModificationMap {
    pub height: usize,
    pub width: usize,
    pub m: Vec<f64>,
}

impl ModificationMap {
    pub fn is_discrete(&self) -> bool {
        self.m.iter().all(|&v| v == -1.0 || v == 0.0 || v == 1.0)
    }

    pub fn change_count(&self) -> usize {
        self.m.iter().filter(|&&v| v != 0.0).count()
    }

    /// Apply discrete changes, reflecting any that would leave `[0, 255]`.
    pub fn apply(&self, cover: &ImageGray) -> Result<ImageGray, EmbedError> {
        check_shape(cover.shape(), (self.height, self.width))?;
        let pixels = cover
            .pixels()
            .iter()
            .zip(&self.m)
            .map(|(&c, &m)| {
                let d = m.round() as i32;
                let v = c as i32 + d;
                if (0..=255).contains(&v) {
                    v as u8
                } else {
                    (c as i32 - d) as u8
                }
            })
            .collect();
        Ok(ImageGray::new(self.height, self.width, pixels).expect("same shape"))
    }
}

/// Discrete change map from thresholding noise.
///
/// A draw exactly on a threshold maps to no change.
pub fn piecewise_modify(p: &ProbabilityMap, r: &NoiseField) -> Result<ModificationMap, EmbedError> {
    check_shape(p.shape(), r.shape())?;
    let m = p
        .plus
        .iter()
        .zip(&p.minus)
        .zip(&r.r)
        .map(|((&pp, &pm), &r)| {
            if r < pm {
                -1.0
            } else if r > 1.0 - pp {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(ModificationMap {
        height: p.height,
        width: p.width,
        m,
    })
}

/// Continuous surrogate of [`piecewise_modify`] for one pixel.
pub fn double_tanh(p_plus: f64, p_minus: f64, r: f64, gamma: f64) -> f64 {
    0.5 * (gamma * (p_plus - (1.0 - r))).tanh() - 0.5 * (gamma * (p_minus - r)).tanh()
}

/// Partial derivatives of [`double_tanh`] with respect to `p_plus` and
/// `p_minus`.
pub fn double_tanh_grad(p_plus: f64, p_minus: f64, r: f64, gamma: f64) -> (f64, f64) {
    let sech2 = |x: f64| 1.0 - x.tanh().powi(2);
    (
        0.5 * gamma * sech2(gamma * (p_plus - (1.0 - r))),
        -0.5 * gamma * sech2(gamma * (p_minus - r)),
    )
}

pub fn double_tanh_modify(
    p: &ProbabilityMap,
    r: &NoiseField,
    gamma: f64,
) -> Result<ModificationMap, EmbedError> {
    check_shape(p.shape(), r.shape())?;
    if !(gamma > 0.0) {
        return Err(EmbedError::Params(format!("gamma must be positive, got {gamma}")));
    }
    let m = p
        .plus
        .iter()
        .zip(&p.minus)
        .zip(&r.r)
        .map(|((&pp, &pm), &r)| double_tanh(pp, pm, r, gamma))
        .collect();
    Ok(ModificationMap {
        height: p.height,
        width: p.width,
        m,
    })
}

/// Per-pixel ternary costs; the cost of leaving a pixel unchanged is zero.
///
/// Values at or above [`WET_COST`] are wet and normalized to exactly that
/// sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    height: usize,
    width: usize,
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl CostMap {
    pub fn new(height: usize, width: usize, plus: Vec<f64>, minus: Vec<f64>) -> Result<Self, EmbedError> {
        if plus.len() != height * width || minus.len() != height * width {
            return Err(EmbedError::Shape {
                a: (height, width),
                b: (plus.len(), minus.len()),
            });
        }
        let clean = |v: Vec<f64>| -> Result<Vec<f64>, EmbedError> {
            v.into_iter()
                .enumerate()
                .map(|(index, c)| {
                    if c.is_nan() || c == f64::NEG_INFINITY {
                        Err(EmbedError::Cost { index, value: c })
                    } else if is_wet(c) {
                        Ok(WET_COST)
                    } else {
                        Ok(c)
                    }
                })
                .collect()
        };
        Ok(Self {
            height,
            width,
            plus: clean(plus)?,
            minus: clean(minus)?,
        })
    }

    pub fn symmetric(height: usize, width: usize, rho: Vec<f64>) -> Result<Self, EmbedError> {
        Self::new(height, width, rho.clone(), rho)
    }

    pub fn constant(height: usize, width: usize, rho: f64) -> Self {
        Self::symmetric(height, width, vec![rho; height * width]).expect("valid constant cost")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty()
    }

    pub fn plus(&self) -> &[f64] {
        &self.plus
    }

    pub fn minus(&self) -> &[f64] {
        &self.minus
    }

    pub fn is_wet_at(&self, i: usize) -> bool {
        is_wet(self.plus[i]) && is_wet(self.minus[i])
    }

    pub fn wet_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_wet_at(i)).count()
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        grid::write(path, self.height, self.width, &[&self.plus, &self.minus])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let g = grid::read(path)?;
        match g.planes.len() {
            1 => Self::symmetric(g.height, g.width, g.planes.into_iter().next().expect("plane")),
            2 => {
                let mut it = g.planes.into_iter();
                let plus = it.next().expect("plane");
                Self::new(g.height, g.width, plus, it.next().expect("plane"))
            }
            found => Err(GridError::Planes { expected: 2, found }.into()),
        }
    }
}

fn prob_to_cost(p: f64, index: usize) -> Result<f64, EmbedError> {
    if !(0.0..0.5).contains(&p) {
        return Err(EmbedError::Domain { index, value: p });
    }
    if p == 0.0 {
        return Ok(WET_COST);
    }
    Ok((1.0 / p - 2.0).ln().min(WET_COST))
}

/// `rho = ln(1/p - 2)` per direction; a zero probability is wet.
///
/// Probabilities above 1/3 give negative costs. They are kept so that
/// [`costs_to_probs`] inverts this exactly; the codec floors them at zero.
pub fn probs_to_costs(p: &ProbabilityMap) -> Result<CostMap, EmbedError> {
    let plus = p
        .plus
        .iter()
        .enumerate()
        .map(|(i, &v)| prob_to_cost(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    let minus = p
        .minus
        .iter()
        .enumerate()
        .map(|(i, &v)| prob_to_cost(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    CostMap::new(p.height, p.width, plus, minus)
}

fn gibbs(rho_plus: f64, rho_minus: f64, lambda: f64) -> (f64, f64) {
    let ep = if is_wet(rho_plus) { 0.0 } else { (-lambda * rho_plus).exp() };
    let em = if is_wet(rho_minus) { 0.0 } else { (-lambda * rho_minus).exp() };
    let z = 1.0 + ep + em;
    (ep / z, em / z)
}

/// Gibbs probabilities `p(m) ∝ exp(-rho(m))` with `rho(0) = 0`.
pub fn costs_to_probs(c: &CostMap) -> ProbabilityMap {
    costs_to_probs_lambda(c, 1.0)
}

pub fn costs_to_probs_lambda(c: &CostMap, lambda: f64) -> ProbabilityMap {
    let (plus, minus) = c
        .plus
        .iter()
        .zip(&c.minus)
        .map(|(&a, &b)| gibbs(a, b, lambda))
        .unzip();
    ProbabilityMap {
        height: c.height,
        width: c.width,
        plus,
        minus,
    }
}

/// Gibbs probabilities whose ternary entropy equals `bits`, found by
/// bisection on the inverse temperature. This is the payload-limited
/// sender used to simulate embedding with arbitrary costs.
pub fn probs_for_payload(c: &CostMap, bits: f64) -> Result<ProbabilityMap, EmbedError> {
    let dry = c.len() - c.wet_count();
    let max_bits = {
        let p = costs_to_probs_lambda(c, 0.0);
        capacity(&p)
    };
    if bits > max_bits * (1.0 - 1e-9) || dry == 0 {
        return Err(EmbedError::Payload {
            requested: bits.ceil() as usize,
            capacity: max_bits.floor() as usize,
        });
    }
    if bits <= 0.0 {
        return Ok(costs_to_probs_lambda(c, f64::INFINITY));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while capacity(&costs_to_probs_lambda(c, hi)) > bits {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if capacity(&costs_to_probs_lambda(c, mid)) > bits {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(costs_to_probs_lambda(c, 0.5 * (lo + hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(p: f64, n: usize) -> ProbabilityMap {
        ProbabilityMap::symmetric(1, n, &vec![p; n]).unwrap()
    }

    #[test]
    fn piecewise_first_branch() {
        let p = ProbabilityMap::from_planes(1, 1, vec![0.2], vec![0.2]).unwrap();
        let r = NoiseField {
            height: 1,
            width: 1,
            seed: 0,
            r: vec![0.1],
        };
        assert_eq!(piecewise_modify(&p, &r).unwrap().m, vec![-1.0]);
    }

    #[test]
    fn zero_probability_never_changes() {
        let p = sym(0.0, 1000);
        let mut r = NoiseField::generate(1, 1000, 4);
        r.r[0] = 0.0;
        r.r[1] = 1.0;
        assert_eq!(piecewise_modify(&p, &r).unwrap().change_count(), 0);
    }

    #[test]
    fn thresholds_map_to_no_change() {
        let p = ProbabilityMap::from_planes(1, 2, vec![0.25, 0.25], vec![0.25, 0.25]).unwrap();
        let r = NoiseField {
            height: 1,
            width: 2,
            seed: 0,
            r: vec![0.25, 0.75],
        };
        assert_eq!(piecewise_modify(&p, &r).unwrap().m, vec![0.0, 0.0]);
    }

    #[test]
    fn double_tanh_cancels_at_midpoint() {
        assert!(double_tanh(0.0, 0.0, 0.5, 60.0).abs() < 1e-15);
    }

    #[test]
    fn cost_examples() {
        let p = ProbabilityMap::from_planes(1, 2, vec![1.0 / 3.0, 0.25], vec![1.0 / 3.0, 0.25]);
        // 1/3 + 1/3 < 1 so this is a valid ternary distribution.
        let c = probs_to_costs(&p.unwrap()).unwrap();
        assert!(c.plus()[0].abs() < 1e-12);
        assert!((c.plus()[1] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cost_domain_error() {
        let p = ProbabilityMap::from_planes(1, 1, vec![0.5], vec![0.0]).unwrap();
        assert!(matches!(probs_to_costs(&p), Err(EmbedError::Domain { .. })));
    }

    #[test]
    fn zero_cost_is_uniform_and_wet_is_frozen() {
        let c = CostMap::new(1, 2, vec![0.0, WET_COST], vec![0.0, WET_COST]).unwrap();
        let p = costs_to_probs(&c);
        assert!((p.plus()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((p.plus()[1], p.minus()[1]), (0.0, 0.0));
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(capacity(&sym(0.0, 10)), 0.0);
        let u = ProbabilityMap::from_planes(2, 2, vec![1.0 / 3.0; 4], vec![1.0 / 3.0; 4]).unwrap();
        assert!((capacity(&u) - 4.0 * 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn reflection_at_saturation() {
        let cover = ImageGray::new(1, 2, vec![255, 0]).unwrap();
        let m = ModificationMap {
            height: 1,
            width: 2,
            m: vec![1.0, -1.0],
        };
        assert_eq!(m.apply(&cover).unwrap().pixels(), &[254, 1]);
    }

    #[test]
    fn payload_solver_hits_target() {
        let rho: Vec<f64> = (0..400).map(|i| 0.1 + (i % 17) as f64 * 0.4).collect();
        let c = CostMap::symmetric(20, 20, rho).unwrap();
        let p = probs_for_payload(&c, 160.0).unwrap();
        assert!((capacity(&p) - 160.0).abs() < 1e-6);
        assert!(probs_for_payload(&c, 1000.0).is_err());
    }

    proptest! {
        #[test]
        fn cost_round_trip(p in 1e-6f64..0.499) {
            let pm = ProbabilityMap::from_planes(1, 1, vec![p], vec![p]).unwrap();
            let back = costs_to_probs(&probs_to_costs(&pm).unwrap());
            prop_assert!((back.plus()[0] - p).abs() < 1e-9);
        }

        #[test]
        fn capacity_monotone(a in 0.0f64..0.6, d in 0.0f64..0.06) {
            prop_assert!(capacity(&sym(a + d, 1)) >= capacity(&sym(a, 1)) - 1e-12);
        }
    }
}
