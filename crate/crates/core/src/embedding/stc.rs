//! Binary syndrome-trellis code over the LSB plane.
//!
//! The parity-check matrix has one row per capacity bit. Row `k` owns the
//! column block `[floor(k·n/m), floor((k+1)·n/m))` and every column in that
//! block carries an `h`-bit column of the submatrix, touching rows
//! `k..k+h`. Columns are truncated below the last row.
//!
//! A message shorter than the capacity constrains only the leading rows;
//! extraction always returns every row's syndrome bit, so the leading bits
//! equal the message. [`embed_bytes`] and [`extract_bytes`] add a 32-bit
//! length prefix for exact recovery.
//!
//! Ternary costs reduce to a binary flip cost per pixel: the cheaper of the
//! two directions that stay inside `[0, 255]`. Negative costs are floored at
//! zero. Equal directions are broken by a keyed pseudo-random bit so changes
//! stay balanced.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_wet, CostMap, EmbedError};
use crate::image::ImageGray;

/// Codec parameters shared by sender and receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StcParams {
    /// Constraint height.
    pub h: usize,
    /// Capacity in bits per pixel.
    pub payload_q: f64,
    /// Seed of the pixel permutation and direction tie-breaks.
    pub key: u64,
}

impl Default for StcParams {
    fn default() -> Self {
        Self {
            h: 7,
            payload_q: 0.4,
            key: 0,
        }
    }
}

impl StcParams {
    pub fn new(h: usize, payload_q: f64) -> Self {
        Self {
            h,
            payload_q,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if !(2..=12).contains(&self.h) {
            return Err(EmbedError::Params(format!("h = {} outside 2..=12", self.h)));
        }
        if !(self.payload_q > 0.0 && self.payload_q < 1.0) {
            return Err(EmbedError::Params(format!(
                "payload {} bpp outside (0, 1)",
                self.payload_q
            )));
        }
        Ok(())
    }

    /// Number of message bits an `n`-pixel image carries.
    pub fn capacity_bits(&self, n: usize) -> usize {
        (self.payload_q * n as f64).floor() as usize
    }
}

/// A parity-check matrix of `m` rows over `n` cover bits.
#[derive(Debug, Clone)]
pub struct StcCode {
    n: usize,
    m: usize,
    h: usize,
    columns: Vec<u32>,
}

impl StcCode {
    pub fn new(n: usize, m: usize, h: usize) -> Result<Self, EmbedError> {
        if m == 0 || m > n {
            return Err(EmbedError::Params(format!("{m} rows over {n} columns")));
        }
        if !(1..=12).contains(&h) {
            return Err(EmbedError::Params(format!("h = {h} outside 1..=12")));
        }
        let width = n.div_ceil(m);
        // Fixed seed: the submatrix is a public function of (h, width).
        let mut rng = ChaCha8Rng::seed_from_u64(0x5743_0000 ^ ((h as u64) << 32) ^ width as u64);
        let edge = 1u32 | (1u32 << (h - 1));
        let columns = (0..width)
            .map(|_| (rng.random::<u32>() & ((1u32 << h) - 1)) | edge)
            .collect();
        Ok(Self { n, m, h, columns })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> usize {
        self.h
    }

    fn block(&self, k: usize) -> std::ops::Range<usize> {
        (k * self.n / self.m)..((k + 1) * self.n / self.m)
    }

    /// Column bits touching rows `k..`, truncated at the last row.
    fn column(&self, k: usize, offset: usize) -> u32 {
        let rows_left = self.m - k;
        let mask = if rows_left >= self.h {
            (1u32 << self.h) - 1
        } else {
            (1u32 << rows_left) - 1
        };
        self.columns[offset] & mask
    }

    /// Dense `m × n` parity-check matrix.
    pub fn parity_check_matrix(&self) -> Vec<Vec<u8>> {
        let mut hm = vec![vec![0u8; self.n]; self.m];
        for k in 0..self.m {
            let start = self.block(k).start;
            for j in self.block(k) {
                let col = self.column(k, j - start);
                for (t, row) in hm.iter_mut().skip(k).take(self.h).enumerate() {
                    row[j] = ((col >> t) & 1) as u8;
                }
            }
        }
        hm
    }

    pub fn syndrome(&self, y: &[u8]) -> Vec<u8> {
        assert_eq!(y.len(), self.n, "word length");
        let mut out = Vec::with_capacity(self.m);
        let mut state = 0u32;
        for k in 0..self.m {
            let start = self.block(k).start;
            for j in self.block(k) {
                if y[j] & 1 == 1 {
                    state ^= self.column(k, j - start);
                }
            }
            out.push((state & 1) as u8);
            state >>= 1;
        }
        out
    }

    /// Minimum-cost word `y` whose leading syndrome bits equal `message`.
    ///
    /// `costs[j]` is the price of `y[j] != x[j]`; infinite or wet costs
    /// forbid the flip. Returns the word and its total cost.
    pub fn embed(&self, x: &[u8], costs: &[f64], message: &[u8]) -> Result<(Vec<u8>, f64), EmbedError> {
        assert_eq!(x.len(), self.n, "cover length");
        assert_eq!(costs.len(), self.n, "cost length");
        if message.len() > self.m {
            return Err(EmbedError::Payload {
                requested: message.len(),
                capacity: self.m,
            });
        }
        let states = 1usize << self.h;
        let words = states.div_ceil(64);
        let half = states / 2;
        let half_words = half.div_ceil(64).max(1);
        let mut cost = vec![f64::INFINITY; states];
        let mut next = vec![f64::INFINITY; states];
        cost[0] = 0.0;
        let mut col_paths = vec![0u64; self.n * words];
        let mut row_paths = vec![0u64; self.m * half_words];

        for k in 0..self.m {
            let start = self.block(k).start;
            for j in self.block(k) {
                let col = self.column(k, j - start) as usize;
                let flip = if is_wet(costs[j]) { f64::INFINITY } else { costs[j] };
                let (c0, c1) = if x[j] & 1 == 0 { (0.0, flip) } else { (flip, 0.0) };
                let path = &mut col_paths[j * words..(j + 1) * words];
                for s in 0..states {
                    let keep = cost[s] + c0;
                    let take = cost[s ^ col] + c1;
                    if take < keep {
                        next[s] = take;
                        path[s / 64] |= 1 << (s % 64);
                    } else {
                        next[s] = keep;
                    }
                }
                std::mem::swap(&mut cost, &mut next);
            }
            let path = &mut row_paths[k * half_words..(k + 1) * half_words];
            if let Some(&bit) = message.get(k) {
                let b = (bit & 1) as usize;
                for t in 0..half {
                    next[t] = cost[(t << 1) | b];
                }
            } else {
                for t in 0..half {
                    let (a, b) = (cost[t << 1], cost[(t << 1) | 1]);
                    if b < a {
                        next[t] = b;
                        path[t / 64] |= 1 << (t % 64);
                    } else {
                        next[t] = a;
                    }
                }
            }
            next[half..].fill(f64::INFINITY);
            std::mem::swap(&mut cost, &mut next);
        }

        let total = cost[0];
        if !total.is_finite() {
            return Err(EmbedError::Infeasible);
        }
        let mut y = vec![0u8; self.n];
        let mut state = 0usize;
        for k in (0..self.m).rev() {
            let b = match message.get(k) {
                Some(&bit) => (bit & 1) as usize,
                None => {
                    let path = &row_paths[k * half_words..(k + 1) * half_words];
                    ((path[state / 64] >> (state % 64)) & 1) as usize
                }
            };
            state = (state << 1) | b;
            let start = self.block(k).start;
            for j in self.block(k).rev() {
                let path = &col_paths[j * words..(j + 1) * words];
                let took = (path[state / 64] >> (state % 64)) & 1 == 1;
                y[j] = took as u8;
                if took {
                    state ^= self.column(k, j - start) as usize;
                }
            }
        }
        debug_assert_eq!(state, 0);
        Ok((y, total))
    }
}

fn permutation(n: usize, key: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    perm
}

fn code_for(n: usize, params: &StcParams) -> Result<StcCode, EmbedError> {
    params.validate()?;
    let m = params.capacity_bits(n);
    if m == 0 {
        return Err(EmbedError::Params(format!("{n} pixels carry no bits at {} bpp", params.payload_q)));
    }
    StcCode::new(n, m, params.h)
}

/// Embed `message` (one bit per byte, `0` or `1`) into the cover's LSB
/// plane at minimum total cost.
pub fn stc_embed(
    cover: &ImageGray,
    costs: &CostMap,
    message: &[u8],
    params: &StcParams,
) -> Result<ImageGray, EmbedError> {
    super::check_shape(cover.shape(), costs.shape())?;
    let n = cover.len();
    let code = code_for(n, params)?;
    if message.len() > code.m() {
        return Err(EmbedError::Payload {
            requested: message.len(),
            capacity: code.m(),
        });
    }
    let perm = permutation(n, params.key);
    let mut tie = ChaCha8Rng::seed_from_u64(params.key ^ 0x9E37_79B9_7F4A_7C15);
    let pixels = cover.pixels();
    // Direction per pixel: +1 or -1, and the binary flip cost.
    let mut direction = vec![0i16; n];
    let mut flip_cost = vec![0.0; n];
    for i in 0..n {
        let (rp, rm) = (costs.plus()[i], costs.minus()[i]);
        let up_ok = pixels[i] < 255 && !is_wet(rp);
        let down_ok = pixels[i] > 0 && !is_wet(rm);
        let coin: bool = tie.random();
        let (d, c) = match (up_ok, down_ok) {
            (true, true) if rp < rm => (1, rp),
            (true, true) if rm < rp => (-1, rm),
            (true, true) => (if coin { 1 } else { -1 }, rp),
            (true, false) => (1, rp),
            (false, true) => (-1, rm),
            (false, false) => (0, f64::INFINITY),
        };
        direction[i] = d;
        flip_cost[i] = c.max(0.0);
    }
    let x: Vec<u8> = perm.iter().map(|&i| pixels[i] & 1).collect();
    let c: Vec<f64> = perm.iter().map(|&i| flip_cost[i]).collect();
    let (y, _) = code.embed(&x, &c, message)?;
    let mut out = pixels.to_vec();
    for (pos, &i) in perm.iter().enumerate() {
        if y[pos] != x[pos] {
            out[i] = (out[i] as i16 + direction[i]) as u8;
        }
    }
    Ok(ImageGray::new(cover.height(), cover.width(), out).expect("same shape"))
}

/// Syndrome of the stego's LSB plane: `floor(q·n)` bits.
///
/// Mismatched parameters cannot be detected and yield unrelated bits.
pub fn stc_extract(stego: &ImageGray, params: &StcParams) -> Result<Vec<u8>, EmbedError> {
    let n = stego.len();
    let code = code_for(n, params)?;
    let perm = permutation(n, params.key);
    let y: Vec<u8> = perm.iter().map(|&i| stego.pixels()[i] & 1).collect();
    Ok(code.syndrome(&y))
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes
        .iter()
        .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1))
        .collect()
}

pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | (b & 1)) << (8 - c.len()))
        .collect()
}

/// Largest byte message [`embed_bytes`] accepts for an `n`-pixel image.
pub fn byte_capacity(n: usize, params: &StcParams) -> usize {
    params.capacity_bits(n).saturating_sub(32) / 8
}

/// Embed a byte message behind a 32-bit big-endian length prefix.
pub fn embed_bytes(
    cover: &ImageGray,
    costs: &CostMap,
    message: &[u8],
    params: &StcParams,
) -> Result<ImageGray, EmbedError> {
    let cap = byte_capacity(cover.len(), params);
    if message.len() > cap {
        return Err(EmbedError::Payload {
            requested: message.len() * 8 + 32,
            capacity: params.capacity_bits(cover.len()),
        });
    }
    let mut framed = (message.len() as u32).to_be_bytes().to_vec();
    framed.extend_from_slice(message);
    stc_embed(cover, costs, &bytes_to_bits(&framed), params)
}

pub fn extract_bytes(stego: &ImageGray, params: &StcParams) -> Result<Vec<u8>, EmbedError> {
    let bits = stc_extract(stego, params)?;
    if bits.len() < 32 {
        return Err(EmbedError::Params("image too small for a length prefix".into()));
    }
    let bytes = bits_to_bytes(&bits);
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > byte_capacity(stego.len(), params) {
        return Err(EmbedError::Params(format!(
            "length prefix {len} exceeds capacity; wrong key or parameters"
        )));
    }
    Ok(bytes[4..4 + len].to_vec())
}
