//! Shape-changing conv modules built from BDC paths. Every module keeps a
//! parameter-free full-precision residual of matching shape.

use crate::analysis::cost::LayerDesc;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::exec::{Network, Eager, Exec};
use super::unit::{BdcPath, BdcUnitConfig, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    /// `(C, H, W) -> (C, H, W)`.
    Basic,
    /// `(C, H, W) -> (2C, H/2, W/2)`.
    DownSample,
    /// `(C, H, W) -> (C, 2H, 2W)`.
    UpSample,
    /// `(C, H, W) -> (C/2, H, W)`.
    ChannelReduce,
}

impl ModuleKind {
    /// Output dims for an input of `dims`, or the divisibility error.
    pub fn output_dims(self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = dims;
        let bad = |module| Error::IndivisibleShape {
            dims: dims.to_vec(),
            module,
        };
        match self {
            ModuleKind::Basic => Ok(dims),
            ModuleKind::DownSample if h % 2 != 0 || w % 2 != 0 => Err(bad("DownSample")),
            ModuleKind::DownSample => Ok([2 * c, h / 2, w / 2]),
            ModuleKind::UpSample => Ok([c, 2 * h, 2 * w]),
            ModuleKind::ChannelReduce if c % 2 != 0 => Err(bad("ChannelReduce")),
            ModuleKind::ChannelReduce => Ok([c / 2, h, w]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvModule {
    pub kind: ModuleKind,
    /// Input channel count.
    pub channels: usize,
    pub precision: Precision,
    paths: Vec<BdcPath>,
}

impl ConvModule {
    /// Registers a module whose paths follow `cfg` (input channels are
    /// `cfg.channels`).
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        kind: ModuleKind,
        cfg: &BdcUnitConfig,
        precision: Precision,
    ) -> Result<Self> {
        let c = cfg.channels;
        let paths = match kind {
            ModuleKind::Basic | ModuleKind::UpSample => {
                vec![BdcPath::register(store, rng, &format!("{prefix}.path"), cfg, precision, c, 1)?]
            }
            ModuleKind::DownSample => (0..2)
                .map(|i| BdcPath::register(store, rng, &format!("{prefix}.path{i}"), cfg, precision, c, 2))
                .collect::<Result<_>>()?,
            ModuleKind::ChannelReduce => {
                if !c.is_multiple_of(2) {
                    return Err(Error::IndivisibleShape {
                        dims: vec![c],
                        module: "ChannelReduce",
                    });
                }
                vec![BdcPath::register(store, rng, &format!("{prefix}.path"), cfg, precision, c / 2, 1)?]
            }
        };
        Ok(Self {
            kind,
            channels: c,
            precision,
            paths,
        })
    }

    pub fn paths(&self) -> &[BdcPath] {
        &self.paths
    }

    fn check_input(&self, dims: &[usize]) -> Result<[usize; 3]> {
        match *dims {
            [c, h, w] if c == self.channels => Ok([c, h, w]),
            _ => Err(Error::ShapeMismatch {
                expected: vec![self.channels],
                got: dims.to_vec(),
            }),
        }
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        let dims = self.check_input(&e.dims(x)?)?;
        self.kind.output_dims(dims)?;
        match self.kind {
            ModuleKind::Basic => {
                let p = self.paths[0].forward(e, x)?;
                e.add(x, &p)
            }
            ModuleKind::DownSample => {
                let pooled = e.avg_pool2(x)?;
                let p0 = self.paths[0].forward(e, x)?;
                let p1 = self.paths[1].forward(e, x)?;
                let y0 = e.add(&pooled, &p0)?;
                let y1 = e.add(&pooled, &p1)?;
                e.concat_channels(&y0, &y1)
            }
            ModuleKind::UpSample => {
                let u = e.upsample2(x)?;
                let p = self.paths[0].forward(e, &u)?;
                e.add(&u, &p)
            }
            ModuleKind::ChannelReduce => {
                let r = e.channel_pair_mean(x)?;
                let p = self.paths[0].forward(e, x)?;
                e.add(&r, &p)
            }
        }
    }

    /// Cost entries for an input of `dims`, and the output dims.
    pub fn describe(&self, store: &ParamStore, dims: [usize; 3]) -> Result<(Vec<LayerDesc>, [usize; 3])> {
        let dims = self.check_input(&dims)?;
        let out_dims = self.kind.output_dims(dims)?;
        let path_in = match self.kind {
            ModuleKind::UpSample => out_dims,
            _ => dims,
        };
        let mut layers = Vec::new();
        for p in &self.paths {
            layers.extend(p.describe(store, path_in)?.0);
        }
        Ok((layers, out_dims))
    }
}

/// Inference-mode forward of one sample through a module.
pub fn module_forward(x: &Tensor, module: &ConvModule, store: &ParamStore) -> Result<Tensor> {
    let mut e = Eager::inference(store);
    let mut y = module.forward(&mut e, &vec![x.clone()])?;
    Ok(y.pop().expect("one sample in, one out"))
}

impl Network for ConvModule {
    fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        ConvModule::forward(self, e, x)
    }
}
