use candle_core::{Module, Tensor};

use super::unet::UNet;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Coefficients fixed at 1: skips pass through untouched.
    ForcedOpen,
}

/// Additive attention gate: `alpha = sigmoid(psi(relu(Wx x + Wg g)))`, output `x * alpha`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    wx: Conv2d,
    wg: Conv2d,
    psi: Conv2d,
    mode: GateMode,
}

impl AttentionGate {
    pub fn new(ps: &mut ParamStore, name: &str, skip_channels: usize, gate_channels: usize) -> Result<Self> {
        let inter = (skip_channels / 2).max(1);
        Ok(Self {
            wx: Conv2d::new(ps, &format!("{name}.wx"), skip_channels, inter, 1, 0, false)?,
            wg: Conv2d::new(ps, &format!("{name}.wg"), gate_channels, inter, 1, 0, true)?,
            psi: Conv2d::new(ps, &format!("{name}.psi"), inter, 1, 1, 0, true)?,
            mode: GateMode::Learned,
        })
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
    }

    /// Attention coefficients `[B, 1, H, W]` for the skip resolution.
    ///
    /// The gate may be coarser than the skip by an integer factor; its
    /// projection is then upsampled by nearest neighbour.
    pub fn coefficients(&self, skip: &Tensor, gate: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = skip.dims4()?;
        let (gb, _, gh, gw) = gate.dims4()?;
        let incompatible = || Error::ShapeIncompatible { skip: skip.dims().to_vec(), gate: gate.dims().to_vec() };
        if gb != b || gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 || h / gh != w / gw {
            return Err(incompatible());
        }
        let mut g = self.wg.forward(gate).map_err(|_| incompatible())?;
        if gh != h {
            g = g.upsample_nearest2d(h, w)?;
        }
        let x = self.wx.forward(skip).map_err(|_| incompatible())?;
        let a = self.psi.forward(&(x + g)?.relu()?)?;
        Ok(candle_nn::ops::sigmoid(&a)?)
    }

    pub fn forward(&self, skip: &Tensor, gate: &Tensor) -> Result<Tensor> {
        match self.mode {
            GateMode::ForcedOpen => Ok(skip.clone()),
            GateMode::Learned => Ok(skip.broadcast_mul(&self.coefficients(skip, gate)?)?),
        }
    }
}

/// U-Net with an attention gate on every skip connection. The gating signal
/// is the up-convolved decoder feature at the skip's resolution.
#[derive(Debug, Clone)]
pub(crate) struct AttentionUNet {
    pub unet: UNet,
    pub gates: Vec<AttentionGate>,
}

impl AttentionUNet {
    pub fn new(ps: &mut ParamStore, unet: UNet, channels: &[usize]) -> Result<Self> {
        let gates = (0..channels.len() - 1)
            .map(|i| AttentionGate::new(ps, &format!("gates.{i}"), channels[i], channels[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { unet, gates })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.unet.forward_with(x, |level, skip, up| self.gates[level].forward(skip, up))
    }
}
