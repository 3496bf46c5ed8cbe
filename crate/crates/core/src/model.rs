//! Backbone plus coordinate head, built for one input resolution.

use cdkd_autograd::{DiffTensor, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, init_backbone, BackboneConfig};
use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamSet, Role};
use crate::simcc::{head_forward, init_head, SimccConfig};

/// Independent initialization streams. Giving each parameter group its own
/// stream means adding or removing one group never changes the initial
/// values of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStream {
    Backbone,
    Head,
    Sape,
}

pub fn init_rng(seed: u64, stream: InitStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stream {
        InitStream::Backbone => 0x10,
        InitStream::Head => 0x11,
        InitStream::Sape => 0x12,
    });
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    pub backbone: BackboneConfig,
    pub simcc: SimccConfig,
    /// Input side in pixels.
    pub side: usize,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct PoseOutput {
    pub feature: DiffTensor,
    pub logits_x: DiffTensor,
    pub logits_y: DiffTensor,
}

impl PoseNet {
    pub fn new(backbone: BackboneConfig, simcc: SimccConfig, side: usize) -> Result<Self> {
        backbone.validate()?;
        simcc.validate()?;
        backbone.feature_side(side)?;
        simcc.bins(side)?;
        Ok(Self { backbone, simcc, side })
    }

    pub fn feature_side(&self) -> usize {
        self.side / self.backbone.total_stride
    }

    pub fn feature_len(&self) -> usize {
        self.backbone.out_channels() * self.feature_side().pow(2)
    }

    pub fn bins(&self) -> usize {
        self.simcc.bins(self.side).expect("validated in new")
    }

    /// Fresh backbone and head parameters from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        init_backbone(&mut params, &self.backbone, &mut init_rng(seed, InitStream::Backbone))?;
        init_head(
            &mut params,
            self.feature_len(),
            self.bins(),
            &self.simcc,
            &mut init_rng(seed, InitStream::Head),
        )?;
        Ok(params)
    }

    /// Checks that `params` hold every backbone and head tensor with the
    /// shape this network expects.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let reference = self.init(0)?;
        for (name, p) in reference.iter() {
            let have = params.get(name)?;
            if have.shape != p.shape {
                return Err(CoreError::Shape(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    have.shape, p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, bound: &Bound, images: &DiffTensor) -> Result<PoseOutput> {
        let s = images.shape();
        if s.len() != 4 || s[2] != self.side || s[3] != self.side {
            return Err(CoreError::Shape(format!(
                "network built for side {} got images {s:?}",
                self.side
            )));
        }
        let feature = backbone_forward(bound, images, &self.backbone)?;
        let (logits_x, logits_y) = head_forward(bound, &feature, &self.simcc)?;
        Ok(PoseOutput {
            feature,
            logits_x,
            logits_y,
        })
    }

    /// Inference-only pass on raw images `[B, C, side, side]`. Only the
    /// backbone and head roles are read and no gradients are recorded.
    pub fn predict(&self, params: &ParamSet, images: &[f64], batch: usize) -> Result<PoseOutput> {
        let tape = Tape::new();
        let mut frozen = params.with_roles(&Role::INFERENCE);
        frozen.freeze();
        let bound = frozen.bind(&tape)?;
        let x = tape.constant(&[batch, self.backbone.in_channels, self.side, self.side], images.to_vec())?;
        self.forward(&bound, &x)
    }
}
