//! Network architectures: the U-Net family (plain, dilated, progressive
//! dilated), the hollow-kernel variants, the per-image kernel generator,
//! temporal convolution blocks and the bidirectional ConvLSTM block.
//!
//! Every named configuration pins the first three encoder blocks layer by
//! layer (channels, kernel, dilation, stride); a bottleneck block and a
//! mirrored three-level decoder with skip concatenations complete the model,
//! ending in a 1x1 convolution to one sigmoid probability map per class.

mod network;

pub use network::{
    build_network, conv_lstm_cell, default_annulus_masks, hollow_layers, ForwardOut, Network,
};

use crate::error::{Error, Result};

/// How a convolution obtains its kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Dense,
    Hollow,
    /// Emitted per image by the generator network.
    Generated,
}

/// One convolution layer of the pinned encoder table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub kind: KernelKind,
    /// PReLU activation follows the convolution.
    pub activation: bool,
    /// BatchNorm precedes the activation.
    pub normalize: bool,
}

/// Named architecture, `A#1 Config.#2.#3` style plus the dense baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConfigName {
    UNet,
    UNetBaseline,
    UNetDilated,
    UNetProgDilated,
    A1_1_1,
    A2_1_1,
    A2_2_1,
    A2_2_2,
    A2_2_3,
    A2_3_1,
    A2_3_2,
    A2_3_3,
}

impl ConfigName {
    pub const ALL: [ConfigName; 12] = [
        ConfigName::UNet,
        ConfigName::UNetBaseline,
        ConfigName::UNetDilated,
        ConfigName::UNetProgDilated,
        ConfigName::A1_1_1,
        ConfigName::A2_1_1,
        ConfigName::A2_2_1,
        ConfigName::A2_2_2,
        ConfigName::A2_2_3,
        ConfigName::A2_3_1,
        ConfigName::A2_3_2,
        ConfigName::A2_3_3,
    ];

    /// The ten configurations pinned by the reference parameter table.
    pub const TABLED: [ConfigName; 10] = [
        ConfigName::UNet,
        ConfigName::A1_1_1,
        ConfigName::UNetDilated,
        ConfigName::A2_1_1,
        ConfigName::A2_2_1,
        ConfigName::A2_2_2,
        ConfigName::A2_2_3,
        ConfigName::A2_3_1,
        ConfigName::A2_3_2,
        ConfigName::A2_3_3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::UNet => "UNet",
            ConfigName::UNetBaseline => "UNetBaseline",
            ConfigName::UNetDilated => "UNetDilated",
            ConfigName::UNetProgDilated => "UNetProgDilated",
            ConfigName::A1_1_1 => "A1-1.1",
            ConfigName::A2_1_1 => "A2-1.1",
            ConfigName::A2_2_1 => "A2-2.1",
            ConfigName::A2_2_2 => "A2-2.2",
            ConfigName::A2_2_3 => "A2-2.3",
            ConfigName::A2_3_1 => "A2-3.1",
            ConfigName::A2_3_2 => "A2-3.2",
            ConfigName::A2_3_3 => "A2-3.3",
        }
    }

    /// Whether downsampling is done by 2x2 max pooling (classic U-Net
    /// chassis) or by the stride-2 entry convolutions of the dilated family.
    pub fn uses_maxpool(self) -> bool {
        matches!(
            self,
            ConfigName::UNet | ConfigName::A1_1_1
        )
    }

    pub fn is_generated(self) -> bool {
        matches!(self, ConfigName::A1_1_1)
    }
}

impl std::str::FromStr for ConfigName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        for name in ConfigName::ALL {
            if name.as_str().eq_ignore_ascii_case(s) {
                return Ok(name);
            }
        }
        Err(Error::Config(format!(
            "unknown model `{}`; valid: {}",
            s,
            ConfigName::ALL.map(|n| n.as_str()).join(", ")
        )))
    }
}

/// The first three encoder blocks of a named configuration, two convolution
/// layers per block, exactly as pinned.
pub fn first_three_blocks(name: ConfigName) -> [LayerSpec; 6] {
    use ConfigName::*;
    use KernelKind::*;
    let layer = |lname, cin, cout, kernel, dilation, stride, kind| LayerSpec {
        name: lname,
        channels_in: cin,
        channels_out: cout,
        kernel,
        dilation,
        stride,
        kind,
        activation: true,
        normalize: true,
    };
    let (k11, kind11): (usize, KernelKind) = match name {
        UNet | UNetBaseline | UNetDilated | UNetProgDilated => (3, Dense),
        A1_1_1 => (20, Generated),
        _ => (10, Hollow),
    };
    let (k12, d12) = match name {
        UNet | UNetBaseline | UNetDilated | A1_1_1 => (3, 1),
        UNetProgDilated => (3, 2),
        _ => (4, 3),
    };
    let (k21, d21, s21, kind21): (usize, usize, usize, KernelKind) = match name {
        UNet | A1_1_1 => (3, 1, 1, Dense),
        UNetBaseline => (3, 1, 2, Dense),
        UNetDilated | UNetProgDilated => (3, 2, 2, Dense),
        A2_1_1 => (3, 2, 2, Dense),
        A2_2_1 => (10, 2, 2, Hollow),
        A2_2_2 => (20, 1, 2, Hollow),
        A2_2_3 => (10, 1, 2, Hollow),
        A2_3_1 => (10, 2, 2, Hollow),
        A2_3_2 => (20, 1, 2, Hollow),
        A2_3_3 => (10, 1, 2, Hollow),
    };
    let (k22, d22) = match name {
        UNet | UNetBaseline | A1_1_1 => (3, 1),
        UNetDilated | A2_1_1 => (3, 2),
        UNetProgDilated => (3, 4),
        _ => (4, 3),
    };
    let (k31, d31, s31, kind31): (usize, usize, usize, KernelKind) = match name {
        UNet | A1_1_1 => (3, 1, 1, Dense),
        UNetBaseline => (3, 1, 2, Dense),
        UNetDilated => (3, 4, 2, Dense),
        UNetProgDilated => (3, 4, 2, Dense),
        A2_1_1 | A2_2_1 | A2_2_2 | A2_2_3 => (3, 4, 2, Dense),
        A2_3_1 => (10, 4, 2, Hollow),
        A2_3_2 => (40, 1, 2, Hollow),
        A2_3_3 => (10, 1, 2, Hollow),
    };
    let d32 = match name {
        UNet | UNetBaseline | A1_1_1 => 1,
        UNetProgDilated => 8,
        _ => 4,
    };
    [
        layer("conv1.1", 1, 32, k11, 1, 1, kind11),
        layer("conv1.2", 32, 32, k12, d12, 1, Dense),
        layer("conv2.1", 32, 128, k21, d21, s21, kind21),
        layer("conv2.2", 128, 128, k22, d22, 1, Dense),
        layer("conv3.1", 128, 256, k31, d31, s31, kind31),
        layer("conv3.2", 256, 256, 3, d32, 1, Dense),
    ]
}

/// Temporal block: one temporal convolution layer, or two with
/// BatchNorm + PReLU between them. Paddings keep T, H, W unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalConvSpec {
    /// (K1, K2, K3) over (T, H, W); K2 == K3.
    pub kernel: (usize, usize, usize),
    pub layers: usize,
    /// Per-input-channel kernels (rank-5 weights) instead of one shared
    /// kernel per output channel.
    pub per_channel: bool,
}

impl Default for TemporalConvSpec {
    fn default() -> Self {
        TemporalConvSpec { kernel: (5, 3, 3), layers: 1, per_channel: false }
    }
}

impl TemporalConvSpec {
    pub fn validate(&self) -> Result<()> {
        let (k1, k2, k3) = self.kernel;
        if ![5, 7, 9].contains(&k1) {
            return Err(Error::invalid("TemporalConvSpec", format!("K1 = {} not in {{5,7,9}}", k1)));
        }
        if k2 != k3 || ![1, 3, 5].contains(&k2) {
            return Err(Error::invalid(
                "TemporalConvSpec",
                format!("K2 = {} and K3 = {} must be equal and in {{1,3,5}}", k2, k3),
            ));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(Error::invalid("TemporalConvSpec", "layer count must be 1 or 2"));
        }
        Ok(())
    }

    pub fn padding(&self) -> (usize, usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2, (self.kernel.2 - 1) / 2)
    }
}

/// Bidirectional ConvLSTM block configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLSTMSpec {
    /// Hidden channels per direction; defaults to the feature width.
    pub hidden: Option<usize>,
    pub kernel: usize,
    pub layers: usize,
}

impl Default for ConvLSTMSpec {
    fn default() -> Self {
        ConvLSTMSpec { hidden: None, kernel: 3, layers: 1 }
    }
}

impl ConvLSTMSpec {
    pub fn validate(&self) -> Result<()> {
        if ![3, 5].contains(&self.kernel) {
            return Err(Error::invalid("ConvLSTMSpec", format!("kernel {} not in {{3,5}}", self.kernel)));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::invalid("ConvLSTMSpec", "layer count must be 1..=3"));
        }
        Ok(())
    }
}

/// A fully resolved architecture selection.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub name: ConfigName,
    /// Uniform channel multiplier (1.0 = the pinned widths).
    pub width: f64,
    /// Multiplier for hollow/generated kernel extents (1.0 = literal table).
    pub kernel_scale: f64,
    pub classes: usize,
    pub temporal: Option<TemporalConvSpec>,
    pub bilstm: Option<ConvLSTMSpec>,
}

impl NetworkConfig {
    pub fn named(name: ConfigName) -> Self {
        NetworkConfig { name, width: 1.0, kernel_scale: 1.0, classes: 3, temporal: None, bilstm: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width <= 4.0) {
            return Err(Error::invalid("NetworkConfig", "width multiplier out of range"));
        }
        if !(self.kernel_scale > 0.0 && self.kernel_scale <= 4.0) {
            return Err(Error::invalid("NetworkConfig", "kernel_scale out of range"));
        }
        if self.classes == 0 {
            return Err(Error::invalid("NetworkConfig", "need at least one class"));
        }
        if let Some(t) = &self.temporal {
            t.validate()?;
        }
        if let Some(b) = &self.bilstm {
            b.validate()?;
        }
        if self.temporal.is_some() && self.bilstm.is_some() {
            return Err(Error::invalid(
                "NetworkConfig",
                "temporal block and bilstm block are alternative heads; pick one",
            ));
        }
        Ok(())
    }

    pub fn scale_channels(&self, c: usize) -> usize {
        ((c as f64 * self.width).round() as usize).max(1)
    }

    pub fn scale_kernel(&self, k: usize, kind: KernelKind) -> usize {
        match kind {
            KernelKind::Dense => k,
            _ => ((k as f64 * self.kernel_scale).round() as usize).max(3),
        }
    }

    /// The encoder table with width/kernel multipliers applied.
    pub fn scaled_blocks(&self) -> [LayerSpec; 6] {
        let mut specs = first_three_blocks(self.name);
        for spec in specs.iter_mut() {
            if spec.channels_in > 1 {
                spec.channels_in = self.scale_channels(spec.channels_in);
            }
            spec.channels_out = self.scale_channels(spec.channels_out);
            spec.kernel = self.scale_kernel(spec.kernel, spec.kind);
        }
        specs
    }
}

/// Layer table of one configuration, row/column layout mirroring the
/// reference table ("channels in / channels out / kernel / dilation /
/// stride" per convolution).
pub fn describe(config: &NetworkConfig) -> String {
    let specs = if (config.width - 1.0).abs() < 1e-12 && (config.kernel_scale - 1.0).abs() < 1e-12 {
        first_three_blocks(config.name)
    } else {
        config.scaled_blocks()
    };
    let mut out = String::new();
    out.push_str(&format!("{:<14}", ""));
    out.push_str(&format!("{:>12}\n", config.name.as_str()));
    for spec in specs {
        out.push_str(&format!("{}\n", spec.name));
        out.push_str(&format!("  {:<12}{:>12}\n", "channels in", spec.channels_in));
        out.push_str(&format!("  {:<12}{:>12}\n", "channels out", spec.channels_out));
        out.push_str(&format!("  {:<12}{:>12}\n", "kernel", spec.kernel));
        out.push_str(&format!("  {:<12}{:>12}\n", "dilation", spec.dilation));
        out.push_str(&format!("  {:<12}{:>12}\n", "stride", spec.stride));
    }
    let down = if config.name.uses_maxpool() { "maxpool 2x2" } else { "stride-2 entry convs" };
    out.push_str(&format!("downsampling: {}\n", down));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a2_2_1_matches_pinned_values() {
        let specs = first_three_blocks(ConfigName::A2_2_1);
        let c21 = specs[2];
        assert_eq!(c21.channels_in, 32);
        assert_eq!(c21.channels_out, 128);
        assert_eq!(c21.kernel, 10);
        assert_eq!(c21.dilation, 2);
        assert_eq!(c21.stride, 2);
        assert_eq!(c21.kind, KernelKind::Hollow);
        assert_eq!(specs[0].kernel, 10);
    }

    #[test]
    fn unet_first_layer() {
        let specs = first_three_blocks(ConfigName::UNet);
        assert_eq!(
            (specs[0].channels_in, specs[0].channels_out, specs[0].kernel, specs[0].dilation, specs[0].stride),
            (1, 32, 3, 1, 1)
        );
    }

    #[test]
    fn width_multiplier_scales_channels() {
        let mut cfg = NetworkConfig::named(ConfigName::UNet);
        cfg.width = 0.25;
        let specs = cfg.scaled_blocks();
        assert_eq!(specs[0].channels_out, 8); // 32 -> 8
        assert_eq!(specs[2].channels_out, 32); // 128 -> 32
        assert_eq!(specs[4].channels_out, 64); // 256 -> 64
        assert_eq!(specs[0].channels_in, 1);
    }

    #[test]
    fn kernel_scale_touches_only_hollow_and_generated() {
        let mut cfg = NetworkConfig::named(ConfigName::A2_2_1);
        cfg.kernel_scale = 0.5;
        let specs = cfg.scaled_blocks();
        assert_eq!(specs[0].kernel, 5); // hollow 10 -> 5
        assert_eq!(specs[2].kernel, 5);
        assert_eq!(specs[1].kernel, 4); // dense untouched
        assert_eq!(specs[4].kernel, 3);
    }

    #[test]
    fn temporal_spec_validation() {
        assert!(TemporalConvSpec { kernel: (5, 3, 3), layers: 1, per_channel: false }.validate().is_ok());
        assert!(TemporalConvSpec { kernel: (4, 3, 3), layers: 1, per_channel: false }.validate().is_err());
        assert!(TemporalConvSpec { kernel: (5, 3, 5), layers: 1, per_channel: false }.validate().is_err());
        assert!(TemporalConvSpec { kernel: (5, 3, 3), layers: 3, per_channel: false }.validate().is_err());
    }

    #[test]
    fn name_parsing_round_trips() {
        for name in ConfigName::ALL {
            let parsed: ConfigName = name.as_str().parse().unwrap();
            assert_eq!(parsed, name);
        }
        assert!("A9-9.9".parse::<ConfigName>().is_err());
    }
}
