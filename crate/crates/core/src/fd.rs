//! Two-sided finite-difference gradient estimates along fixed direction
//! bases, for perturbation tiles queried through a [`QuerySession`].

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{DatasetStream, QuerySession, Sample};
use crate::tensor::{project_linf, tile_expand, PerturbationTile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    /// Real 2-d Fourier components, lowest radial frequency first.
    FftLowFrequency,
    Canonical,
    /// Independent unit-norm Gaussian directions, one stream per index.
    RandomNormal { seed: u64 },
}

impl BasisKind {
    pub fn name(&self) -> &'static str {
        match self {
            BasisKind::FftLowFrequency => "fft",
            BasisKind::Canonical => "canonical",
            BasisKind::RandomNormal { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Wave {
    Cos(i64, i64),
    Sin(i64, i64),
}

/// Deterministic enumeration of unit directions in tile space (`l*l*C`).
///
/// For the Fourier basis the first `l*l` indices are spatial patterns
/// repeated across channels. With `C > 1` the remaining indices repeat the
/// same spatial sequence under orthonormal DCT-II channel patterns, so the
/// whole set stays an orthonormal basis of the tile space.
#[derive(Debug, Clone)]
pub struct DirectionBasis {
    kind: BasisKind,
    side: usize,
    channels: usize,
    waves: Vec<Wave>,
}

impl DirectionBasis {
    pub fn new(kind: BasisKind, side: usize, channels: usize) -> Result<Self> {
        if side == 0 || channels == 0 {
            return Err(Error::Domain(format!("basis needs a non-empty tile, got {side}x{side}x{channels}")));
        }
        let waves = match kind {
            BasisKind::FftLowFrequency => fourier_waves(side),
            _ => Vec::new(),
        };
        Ok(DirectionBasis { kind, side, channels, waves })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn dimension(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn vector(&self, j: usize) -> Result<Vec<f64>> {
        let n = self.dimension();
        if j >= n {
            return Err(Error::Index { what: "basis vector", index: j, len: n });
        }
        Ok(match self.kind {
            BasisKind::Canonical => {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            }
            BasisKind::RandomNormal { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(&mut z);
                z
            }
            BasisKind::FftLowFrequency => self.fourier_vector(j),
        })
    }

    fn fourier_vector(&self, j: usize) -> Vec<f64> {
        let (l, c) = (self.side, self.channels);
        let spatial = l * l;
        let (pattern, wave) = (j / spatial, self.waves[j % spatial]);
        let channel_weight: Vec<f64> = (0..c).map(|k| dct_channel(pattern, k, c)).collect();
        let mut out = Vec::with_capacity(spatial * c);
        for i in 0..l {
            for jj in 0..l {
                let s = match wave {
                    Wave::Cos(u, v) => phase(u, v, i, jj, l).cos(),
                    Wave::Sin(u, v) => phase(u, v, i, jj, l).sin(),
                };
                out.extend(channel_weight.iter().map(|w| w * s));
            }
        }
        normalize(&mut out);
        out
    }
}

fn phase(u: i64, v: i64, i: usize, j: usize, l: usize) -> f64 {
    // reduce the integer product first so large tiles keep full precision
    let l = l as i64;
    let k = (u * i as i64 + v * j as i64).rem_euclid(l);
    2.0 * PI * k as f64 / l as f64
}

/// Orthonormal DCT-II pattern `k` across `c` channels, up to scale.
fn dct_channel(k: usize, ch: usize, c: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        (PI * k as f64 * (ch as f64 + 0.5) / c as f64).cos()
    }
}

fn normalize(z: &mut [f64]) {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        z.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Signed representative of `k mod l` in `(-l/2, l/2]`.
fn signed(k: i64, l: i64) -> i64 {
    let r = k.rem_euclid(l);
    if 2 * r > l {
        r - l
    } else {
        r
    }
}

/// One member per conjugate pair `(u, v) ~ (-u, -v)`, sorted by
/// `u^2 + v^2` then `(u, v)`; cosine before sine, sine dropped when it
/// vanishes (the pair is its own conjugate).
fn fourier_waves(l: usize) -> Vec<Wave> {
    let li = l as i64;
    let mut freqs = Vec::new();
    for a in 0..li {
        for b in 0..li {
            let (u, v) = (signed(a, li), signed(b, li));
            let conj = (signed(-u, li), signed(-v, li));
            if (u, v) >= conj {
                freqs.push((u, v, (u, v) == conj));
            }
        }
    }
    freqs.sort_by_key(|&(u, v, _)| (u * u + v * v, u, v));
    let mut waves = Vec::with_capacity(l * l);
    for (u, v, self_conjugate) in freqs {
        waves.push(Wave::Cos(u, v));
        if !self_conjugate {
            waves.push(Wave::Sin(u, v));
        }
    }
    debug_assert_eq!(waves.len(), l * l);
    waves
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub smoothing: f64,
    pub directions_per_step: usize,
    pub batch_size: usize,
    pub basis: BasisKind,
    /// Number of leading basis vectors cycled through; `None` uses all.
    pub basis_size: Option<usize>,
}

impl FdConfig {
    pub fn validate(&self, dimension: usize) -> Result<()> {
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config(format!("smoothing must be positive, got {}", self.smoothing)));
        }
        if self.directions_per_step == 0 || self.batch_size == 0 {
            return Err(Error::Config("directions per step and batch size must be >= 1".into()));
        }
        match self.basis_size {
            Some(0) => Err(Error::Config("basis size must be >= 1".into())),
            Some(d) if d > dimension => {
                Err(Error::Config(format!("basis size {d} exceeds tile dimension {dimension}")))
            }
            _ => Ok(()),
        }
    }

    pub fn images_per_step(&self) -> usize {
        self.directions_per_step * self.batch_size
    }
}

/// A gradient estimate plus the mean loss over all queries that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct FdEstimate {
    pub gradient: Vec<f64>,
    pub mean_loss: f64,
}

/// Index of the `k`-th direction used in iteration `t`.
pub fn direction_index(iteration: u64, directions_per_step: usize, k: usize, basis_size: usize) -> usize {
    let d = basis_size as u128;
    ((iteration as u128 * directions_per_step as u128 + k as u128) % d) as usize
}

/// Mean over the batch of `(L(d + mu z) - L(d - mu z)) / (2 mu) * z`, with
/// both probe tiles projected onto the epsilon ball before tiling. Issues
/// exactly two queries per image.
pub fn two_sided_estimate(
    session: &mut QuerySession<'_>,
    batch: &[Sample],
    delta: &PerturbationTile,
    direction: &[f64],
    mu: f64,
) -> Result<FdEstimate> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if !(mu > 0.0) {
        return Err(Error::Domain(format!("smoothing must be positive, got {mu}")));
    }
    if direction.len() != delta.dimension() {
        return Err(Error::Shape {
            expected: format!("direction of length {}", delta.dimension()),
            found: format!("{}", direction.len()),
        });
    }
    let eps = delta.epsilon();
    let probe = |sign: f64| -> Result<_> {
        let moved: Vec<f64> = delta.data().iter().zip(direction).map(|(d, z)| d + sign * mu * z).collect();
        let tile = PerturbationTile::new(delta.side(), delta.channels(), project_linf(&moved, eps), eps)?;
        tile_expand(&tile, session.input_shape())
    };
    let plus = probe(1.0)?;
    let minus = probe(-1.0)?;

    let mut quotient = 0.0;
    let mut loss_sum = 0.0;
    for s in batch {
        let l1 = session.loss(s, &plus)?;
        let l2 = session.loss(s, &minus)?;
        quotient += (l1 - l2) / (2.0 * mu);
        loss_sum += l1 + l2;
    }
    let b = batch.len() as f64;
    let scale = quotient / b;
    Ok(FdEstimate {
        gradient: direction.iter().map(|z| scale * z).collect(),
        mean_loss: loss_sum / (2.0 * b),
    })
}

/// Mean of `J` two-sided estimates, each on a fresh batch of `B` images.
/// Fails with `Exhausted` before issuing any query when fewer than `J*B`
/// images remain.
pub fn averaged_gradient(
    session: &mut QuerySession<'_>,
    stream: &mut DatasetStream,
    delta: &PerturbationTile,
    config: &FdConfig,
    basis: &DirectionBasis,
    iteration: u64,
) -> Result<FdEstimate> {
    let n = delta.dimension();
    config.validate(n)?;
    if basis.dimension() != n {
        return Err(Error::Shape {
            expected: format!("basis of dimension {n}"),
            found: format!("{}", basis.dimension()),
        });
    }
    let need = config.images_per_step();
    if stream.remaining() < need {
        return Err(Error::Exhausted { requested: need, remaining: stream.remaining() });
    }
    let d = config.basis_size.unwrap_or(n);
    let mut gradient = vec![0.0; n];
    let mut loss = 0.0;
    for k in 0..config.directions_per_step {
        let z = basis.vector(direction_index(iteration, config.directions_per_step, k, d))?;
        let batch = stream.take(config.batch_size)?;
        let est = two_sided_estimate(session, &batch, delta, &z, config.smoothing)?;
        gradient.iter_mut().zip(&est.gradient).for_each(|(g, e)| *g += e);
        loss += est.mean_loss;
    }
    let j = config.directions_per_step as f64;
    gradient.iter_mut().for_each(|g| *g /= j);
    Ok(FdEstimate { gradient, mean_loss: loss / j })
}
