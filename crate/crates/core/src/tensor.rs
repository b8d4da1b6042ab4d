//! Image and perturbation tensors, tiling, and the two projections used by
//! every attack step.
//!
//! All arrays are stored row-major with the channel index varying fastest:
//! element `(i, j, c)` of an `H x W x C` array lives at `(i * W + j) * C + c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height, width and channel count of an image-shaped array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape {
                expected: "all dimensions >= 1".into(),
                found: format!("{height}x{width}x{channels}"),
            });
        }
        Ok(Shape { height, width, channels })
    }

    /// Square `side x side x channels` shape.
    pub fn square(side: usize, channels: usize) -> Result<Self> {
        Shape::new(side, side, channels)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

fn check_len(shape: Shape, len: usize) -> Result<()> {
    if shape.len() != len {
        return Err(Error::Shape {
            expected: format!("{shape} ({} values)", shape.len()),
            found: format!("{len} values"),
        });
    }
    Ok(())
}

/// A classifier input with pixel intensities in `[0, 1]`.
///
/// The label is optional so that unlabeled archives can feed targeted attacks,
/// whose loss never looks at the true class.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
    label: Option<usize>,
}

impl ImageTensor {
    pub fn new(shape: Shape, data: Vec<f64>, label: Option<usize>) -> Result<Self> {
        check_len(shape, data.len())?;
        if let Some((k, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Domain(format!(
                "pixel {k} has value {v}, outside [0, 1]"
            )));
        }
        Ok(ImageTensor { shape, data, label })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    /// `clip_image(self + perturbation)`, keeping the label.
    pub fn perturbed(&self, perturbation: &UniversalPerturbation) -> Result<ImageTensor> {
        if perturbation.shape != self.shape {
            return Err(Error::Shape {
                expected: self.shape.to_string(),
                found: perturbation.shape.to_string(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&perturbation.data)
            .map(|(x, d)| (x + d).clamp(0.0, 1.0))
            .collect();
        Ok(ImageTensor { shape: self.shape, data, label: self.label })
    }
}

/// The reduced `l x l x C` optimization variable, bounded in l-inf by epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTile {
    side: usize,
    channels: usize,
    data: Vec<f64>,
    epsilon: f64,
}

impl PerturbationTile {
    /// Builds a tile, rejecting any element outside `[-epsilon, epsilon]`.
    pub fn new(side: usize, channels: usize, data: Vec<f64>, epsilon: f64) -> Result<Self> {
        let shape = Shape::square(side, channels)?;
        check_len(shape, data.len())?;
        check_epsilon(epsilon)?;
        if let Some(v) = data.iter().find(|v| !(v.abs() <= epsilon)) {
            return Err(Error::Domain(format!(
                "tile element {v} outside [-{epsilon}, {epsilon}]"
            )));
        }
        Ok(PerturbationTile { side, channels, data, epsilon })
    }

    /// Builds a tile by projecting arbitrary values onto the epsilon ball.
    pub fn projected(side: usize, channels: usize, data: &[f64], epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        PerturbationTile::new(side, channels, project_linf(data, epsilon), epsilon)
    }

    pub fn zeros(side: usize, channels: usize, epsilon: f64) -> Result<Self> {
        PerturbationTile::new(side, channels, vec![0.0; side * side * channels], epsilon)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> Shape {
        Shape { height: self.side, width: self.side, channels: self.channels }
    }

    /// Number of free coordinates, `l * l * C`.
    pub fn dimension(&self) -> usize {
        self.data.len()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

/// Full-resolution perturbation added to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalPerturbation {
    shape: Shape,
    data: Vec<f64>,
    epsilon: f64,
}

impl UniversalPerturbation {
    pub fn new(shape: Shape, data: Vec<f64>, epsilon: f64) -> Result<Self> {
        check_len(shape, data.len())?;
        check_epsilon(epsilon)?;
        let norm = linf_norm(&data);
        if !(norm <= epsilon) {
            return Err(Error::Domain(format!(
                "perturbation l-inf norm {norm} exceeds epsilon {epsilon}"
            )));
        }
        Ok(UniversalPerturbation { shape, data, epsilon })
    }

    pub fn zeros(shape: Shape, epsilon: f64) -> Result<Self> {
        UniversalPerturbation::new(shape, vec![0.0; shape.len()], epsilon)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn linf_norm(&self) -> f64 {
        linf_norm(&self.data)
    }
}

/// Repeats `tile` across an image of the given shape, truncating the last
/// row and column of tiles when the side does not divide the image.
pub fn tile_expand(tile: &PerturbationTile, shape: Shape) -> Result<UniversalPerturbation> {
    if tile.channels != shape.channels {
        return Err(Error::Shape {
            expected: format!("{} channels", shape.channels),
            found: format!("tile with {} channels", tile.channels),
        });
    }
    if shape.height < tile.side || shape.width < tile.side {
        return Err(Error::Shape {
            expected: format!("image at least {0}x{0}", tile.side),
            found: shape.to_string(),
        });
    }
    let data = expand_values(&tile.data, tile.side, shape);
    Ok(UniversalPerturbation { shape, data, epsilon: tile.epsilon })
}

/// Raw tiling on a flat `side x side x C` buffer. Callers guarantee the
/// channel counts agree.
pub(crate) fn expand_values(tile: &[f64], side: usize, shape: Shape) -> Vec<f64> {
    let c = shape.channels;
    let mut out = Vec::with_capacity(shape.len());
    for i in 0..shape.height {
        let row = (i % side) * side;
        for j in 0..shape.width {
            let base = (row + j % side) * c;
            out.extend_from_slice(&tile[base..base + c]);
        }
    }
    out
}

/// Projection onto the l-inf ball of radius `epsilon` (coordinate clamp).
pub fn project_linf(delta: &[f64], epsilon: f64) -> Vec<f64> {
    delta.iter().map(|v| v.clamp(-epsilon, epsilon)).collect()
}

pub fn project_linf_in_place(delta: &mut [f64], epsilon: f64) {
    for v in delta {
        *v = v.clamp(-epsilon, epsilon);
    }
}

/// Projection onto the pixel box `[0, 1]`.
pub fn clip_image(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn linf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tile_from(side: usize, channels: usize, data: Vec<f64>) -> PerturbationTile {
        let eps = linf_norm(&data).max(1e-12);
        PerturbationTile::new(side, channels, data, eps).unwrap()
    }

    #[test]
    fn expand_identity_when_tile_matches_image() {
        let data: Vec<f64> = (0..2 * 2 * 3).map(|k| k as f64 / 100.0).collect();
        let tile = tile_from(2, 3, data.clone());
        let out = tile_expand(&tile, Shape::new(2, 2, 3).unwrap()).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn expand_7x7_to_28x28_is_a_4x4_grid() {
        let data: Vec<f64> = (0..49).map(|k| (k as f64 - 24.0) / 100.0).collect();
        let tile = tile_from(7, 1, data.clone());
        let shape = Shape::new(28, 28, 1).unwrap();
        let out = tile_expand(&tile, shape).unwrap();
        for i in 0..28 {
            for j in 0..28 {
                assert_eq!(out.data()[shape.offset(i, j, 0)], data[(i % 7) * 7 + j % 7]);
            }
        }
        // every 7x7 block is an exact copy of the tile
        for bi in 0..4 {
            for bj in 0..4 {
                let block: Vec<f64> = (0..7)
                    .flat_map(|i| (0..7).map(move |j| (bi * 7 + i, bj * 7 + j)))
                    .map(|(i, j)| out.data()[shape.offset(i, j, 0)])
                    .collect();
                assert_eq!(block, data);
            }
        }
    }

    #[test]
    fn expand_3x3_to_5x5_matches_index_enumeration() {
        let data: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let tile = tile_from(3, 1, data.clone());
        let out = tile_expand(&tile, Shape::new(5, 5, 1).unwrap()).unwrap();
        // Independent oracle: walk the output in reading order with explicit
        // wrap-around counters instead of the modulus.
        let mut expected = Vec::new();
        let mut ti = 0;
        for _ in 0..5 {
            let mut tj = 0;
            for _ in 0..5 {
                expected.push(data[ti * 3 + tj]);
                tj += 1;
                if tj == 3 {
                    tj = 0;
                }
            }
            ti += 1;
            if ti == 3 {
                ti = 0;
            }
        }
        assert_eq!(out.data(), &expected[..]);
        assert_eq!(out.data()[24], 0.5); // (4,4) -> tile (1,1)
    }

    #[test]
    fn expand_rectangular_image() {
        let data: Vec<f64> = (0..4).map(|k| k as f64 / 10.0).collect();
        let tile = tile_from(2, 1, data.clone());
        let shape = Shape::new(3, 5, 1).unwrap();
        let out = tile_expand(&tile, shape).unwrap();
        assert_eq!(out.data()[shape.offset(2, 4, 0)], data[0]);
        assert_eq!(out.data()[shape.offset(1, 3, 0)], data[3]);
    }

    #[test]
    fn expand_rejects_channel_mismatch_and_small_images() {
        let tile = PerturbationTile::zeros(2, 3, 0.1).unwrap();
        assert!(matches!(
            tile_expand(&tile, Shape::new(4, 4, 1).unwrap()),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            tile_expand(&tile, Shape::new(1, 4, 3).unwrap()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_linf(&[0.1, -0.2], 0.3), vec![0.1, -0.2]);
        assert_eq!(project_linf(&[0.5], 0.3), vec![0.3]);
        assert_eq!(project_linf(&[-0.9], 0.05), vec![-0.05]);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_image(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(clip_image(&[1.2, -0.1, 0.5]), vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn constructors_validate() {
        let s = Shape::new(1, 2, 1).unwrap();
        assert!(ImageTensor::new(s, vec![0.0, 1.01], None).is_err());
        assert!(ImageTensor::new(s, vec![0.0], None).is_err());
        assert!(Shape::new(0, 2, 1).is_err());
        assert!(PerturbationTile::new(1, 1, vec![0.5], 0.3).is_err());
        assert!(PerturbationTile::new(1, 1, vec![0.3], 0.3).is_ok());
        assert!(PerturbationTile::zeros(1, 1, 0.0).is_err());
        assert!(UniversalPerturbation::new(s, vec![0.2, -0.4], 0.3).is_err());
    }

    fn tile_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..5, 1usize..4).prop_flat_map(|(side, ch)| {
            let n = side * side * ch;
            (
                Just(side),
                Just(ch),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-1.0f64..1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn expand_is_linear((side, ch, t1, t2) in tile_strategy(), a in -1.0f64..1.0, b in -1.0f64..1.0, extra in 0usize..7) {
            let shape = Shape::new(side + extra, side + extra / 2, ch).unwrap();
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| a * x + b * y).collect();
            let e1 = expand_values(&t1, side, shape);
            let e2 = expand_values(&t2, side, shape);
            let em = expand_values(&mix, side, shape);
            for k in 0..shape.len() {
                prop_assert!((em[k] - (a * e1[k] + b * e2[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn expand_preserves_linf((side, ch, t1, _t2) in tile_strategy(), extra in 0usize..7) {
            let tile = tile_from(side, ch, t1.clone());
            let out = tile_expand(&tile, Shape::new(side + extra, side + extra, ch).unwrap()).unwrap();
            prop_assert_eq!(out.linf_norm(), linf_norm(&t1));
        }

        #[test]
        fn projection_is_idempotent(v in prop::collection::vec(-3.0f64..3.0, 1..50), eps in 0.01f64..2.0) {
            let once = project_linf(&v, eps);
            prop_assert_eq!(project_linf(&once, eps), once.clone());
            prop_assert!(linf_norm(&once) <= eps);
            prop_assert_eq!(clip_image(&clip_image(&v)), clip_image(&v));
        }

        #[test]
        fn clipped_perturbation_stays_in_ball(
            pairs in prop::collection::vec((0.0f64..=1.0, -1.0f64..1.0), 1..64),
            eps in 0.01f64..0.5,
        ) {
            let (x, d): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let dp = project_linf(&d, eps);
            let sum: Vec<f64> = x.iter().zip(&dp).map(|(a, b)| a + b).collect();
            let y = clip_image(&sum);
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(linf_distance(&y, &clip_image(&x)) <= eps + 1e-15);
        }
    }
}
