//! Synthetic voxel scenes with orthographic depth renders.
//!
//! A scene is a stack of axis-aligned boxes standing on the ground plane.
//! The class of a box fixes its height, so the top-down depth map alone
//! determines the labels of every column. Later boxes replace earlier ones
//! inside their footprint.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

/// Integer tensor, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelTensor {
    dims: Vec<usize>,
    data: Vec<usize>,
}

impl LabelTensor {
    pub fn new(dims: &[usize], data: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Viewing direction of an orthographic render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewDir {
    /// Looking down. Image rows follow `x`, columns follow `y`.
    Top,
    /// Looking along `+y`. Image rows follow `z` (highest first), columns
    /// follow `x`.
    Front,
}

pub const VIEWS: [ViewDir; 2] = [ViewDir::Top, ViewDir::Front];

/// Depth value of rays that hit nothing.
pub const BACKGROUND_DEPTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneConfig {
    /// `(X, Y, Z)`.
    pub grid: [usize; 3],
    pub n_boxes: usize,
    pub n_class: usize,
    /// Render size `(H, W)`.
    pub image: [usize; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: [16, 16, 4],
            n_boxes: 6,
            n_class: 4,
            image: [32, 32],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&d| d < 4) {
            return Err(Error::GridTooSmall { dims: self.grid });
        }
        if self.n_class < 2 {
            return Err(Error::InvalidArgument(format!("{} classes, at least 2 needed", self.n_class)));
        }
        if self.image.contains(&0) {
            return Err(Error::InvalidArgument("empty image size".into()));
        }
        Ok(())
    }

    /// Height of boxes of class `c >= 1`.
    pub fn class_height(&self, c: usize) -> usize {
        let z = self.grid[2];
        (c * z).div_ceil(self.n_class - 1).clamp(1, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    /// `(N_view, 1, H, W)` normalized depth maps.
    pub views: Tensor,
    /// `(X, Y, Z)` class per voxel, 0 for free space.
    pub labels: LabelTensor,
}

impl ToyScene {
    /// Renders every view of an existing label grid.
    pub fn from_labels(labels: LabelTensor, image: [usize; 2]) -> Result<Self> {
        let grid: [usize; 3] = labels
            .dims()
            .try_into()
            .map_err(|_| Error::InvalidShape {
                dims: labels.dims().to_vec(),
                reason: "labels must be (X, Y, Z)",
            })?;
        let [h, w] = image;
        let mut data = Vec::with_capacity(VIEWS.len() * h * w);
        for dir in VIEWS {
            data.extend(render(&labels, grid, dir, image));
        }
        Ok(Self {
            views: Tensor::new(&[VIEWS.len(), 1, h, w], data)?,
            labels,
        })
    }

    /// View `v` as a `(1, H, W)` tensor.
    pub fn view(&self, v: usize) -> Result<Tensor> {
        let d = self.views.dims();
        let plane = d[1] * d[2] * d[3];
        let data = self
            .views
            .data()
            .get(v * plane..(v + 1) * plane)
            .ok_or_else(|| Error::InvalidArgument(format!("view {v} of {}", d[0])))?;
        Tensor::new(&d[1..], data.to_vec())
    }
}

fn render(labels: &LabelTensor, [gx, gy, gz]: [usize; 3], dir: ViewDir, [h, w]: [usize; 2]) -> Vec<f64> {
    let occupied = |x: usize, y: usize, z: usize| labels.data()[(x * gy + y) * gz + z] != 0;
    let cell = |i: usize, n: usize, g: usize| ((2 * i + 1) * g) / (2 * n);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let depth = match dir {
                ViewDir::Top => {
                    let (x, y) = (cell(r, h, gx), cell(c, w, gy));
                    (0..gz)
                        .rev()
                        .find(|&z| occupied(x, y, z))
                        .map(|z| (gz - 1 - z) as f64 / gz as f64)
                }
                ViewDir::Front => {
                    let (z, x) = (gz - 1 - cell(r, h, gz), cell(c, w, gx));
                    (0..gy).find(|&y| occupied(x, y, z)).map(|y| y as f64 / gy as f64)
                }
            };
            out.push(depth.unwrap_or(BACKGROUND_DEPTH));
        }
    }
    out
}

/// Random boxes placed on the ground plane of the grid.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ToyScene> {
    cfg.validate()?;
    let [gx, gy, gz] = cfg.grid;
    let mut rng = rng_from_seed(seed);
    let mut labels = LabelTensor::zeros(&cfg.grid);
    for _ in 0..cfg.n_boxes {
        let class = rng.random_range(1..cfg.n_class);
        let wx = rng.random_range(2..=(gx / 2).max(2));
        let wy = rng.random_range(2..=(gy / 2).max(2));
        let x0 = rng.random_range(0..=gx - wx);
        let y0 = rng.random_range(0..=gy - wy);
        let height = cfg.class_height(class);
        for x in x0..x0 + wx {
            for y in y0..y0 + wy {
                let col = &mut labels.data_mut()[(x * gy + y) * gz..(x * gy + y + 1) * gz];
                for (z, l) in col.iter_mut().enumerate() {
                    *l = if z < height { class } else { 0 };
                }
            }
        }
    }
    ToyScene::from_labels(labels, cfg.image)
}

/// Training and held-out scenes drawn from independent seed streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub train: Vec<ToyScene>,
    pub test: Vec<ToyScene>,
}

impl Dataset {
    pub fn generate(seed: u64, cfg: &SceneConfig, n_train: usize, n_test: usize) -> Result<Self> {
        cfg.validate()?;
        let scenes: Vec<ToyScene> = par::map_range(n_train + n_test, |i| generate_scene(derive_seed(seed, i as u64), cfg))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut train = scenes;
        let test = train.split_off(n_train);
        Ok(Self {
            config: *cfg,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let cfg = SceneConfig {
            n_boxes: 0,
            ..Default::default()
        };
        let s = generate_scene(3, &cfg).unwrap();
        assert!(s.labels.data().iter().all(|&l| l == 0));
        assert!(s.views.data().iter().all(|&d| d == BACKGROUND_DEPTH));
        assert_eq!(s.views.dims(), &[2, 1, 32, 32]);
    }

    #[test]
    fn full_grid_box() {
        let grid = [4, 5, 4];
        let labels = LabelTensor::new(&grid, vec![3; 80]).unwrap();
        let s = ToyScene::from_labels(labels, [8, 8]).unwrap();
        // The near faces of a grid-filling box touch both image planes.
        assert!(s.views.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_column_depths() {
        let grid = [4, 4, 4];
        let mut labels = LabelTensor::zeros(&grid);
        // Column (1, 2) occupied for z in 0..2.
        for z in 0..2 {
            labels.data_mut()[(4 + 2) * 4 + z] = 1;
        }
        let s = ToyScene::from_labels(labels, [4, 4]).unwrap();
        let top = s.view(0).unwrap();
        let front = s.view(1).unwrap();
        assert_eq!(top.data()[4 + 2], 0.5);
        assert_eq!(top.data().iter().filter(|&&d| d != BACKGROUND_DEPTH).count(), 1);
        // Front rows 2 and 3 are z = 1 and z = 0; column 1 is x = 1.
        assert_eq!(front.data()[2 * 4 + 1], 0.5);
        assert_eq!(front.data()[3 * 4 + 1], 0.5);
        assert_eq!(front.data().iter().filter(|&&d| d != BACKGROUND_DEPTH).count(), 2);
    }

    #[test]
    fn deterministic_and_bounded() {
        let cfg = SceneConfig::default();
        let a = generate_scene(9, &cfg).unwrap();
        assert_eq!(a, generate_scene(9, &cfg).unwrap());
        assert_ne!(a, generate_scene(10, &cfg).unwrap());
        assert!(a.labels.data().iter().all(|&l| l < cfg.n_class));
        assert!(a.views.data().iter().all(|&d| (0.0..=1.0).contains(&d)));
    }

    #[test]
    fn labels_follow_class_heights() {
        let cfg = SceneConfig::default();
        assert_eq!((1..4).map(|c| cfg.class_height(c)).collect::<Vec<_>>(), [2, 3, 4]);
        let s = generate_scene(1, &cfg).unwrap();
        for col in s.labels.data().chunks(4) {
            let c = col[0];
            let h = if c == 0 { 0 } else { cfg.class_height(c) };
            for (z, &l) in col.iter().enumerate() {
                assert_eq!(l, if z < h { c } else { 0 });
            }
        }
    }

    #[test]
    fn small_grid_rejected() {
        let cfg = SceneConfig {
            grid: [16, 3, 4],
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn dataset_splits_are_disjoint_streams() {
        let d = Dataset::generate(5, &SceneConfig::default(), 3, 2).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (3, 2));
        assert_ne!(d.train[0], d.test[0]);
        assert_eq!(d, Dataset::generate(5, &SceneConfig::default(), 3, 2).unwrap());
    }
}
