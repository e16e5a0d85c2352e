//! Analytic parameter and FLOP counts.
//!
//! Convention: one multiply-add is 2 FLOPs, so a convolution costs
//! `2 * K^2 * C_in * C_out * H_out * W_out`. Batch norm and ReLU are counted as
//! `C * H * W` each. The template branch is counted once (it runs at
//! initialization and on dynamic updates) with zero parameters because its
//! weights are shared with the search branch.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::Result;

pub const FLOP_CONVENTION: &str = "multiply-add = 2 FLOPs; batch-norm and ReLU = C*H*W each";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub convention: String,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn flops_with_prefix(&self, prefix: &str) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .map(|l| l.flops)
            .sum()
    }

    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .map(|l| l.params)
            .sum()
    }

    /// FLOPs of the classification and regression heads.
    pub fn head_flops(&self) -> u64 {
        self.flops_with_prefix("heads.")
    }
}

struct Builder {
    layers: Vec<LayerCost>,
}

impl Builder {
    fn push(&mut self, name: String, params: u64, flops: u64) {
        self.layers.push(LayerCost { name, params, flops });
    }

    /// Conv (+ optional BN, ReLU); returns the output side.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        shared: bool,
        c_in: u64,
        c_out: u64,
        k: u64,
        stride: u64,
        side_in: u64,
        bn: bool,
        relu: bool,
    ) -> u64 {
        let side = side_in.div_ceil(stride);
        let area = side * side;
        let own = |p: u64| if shared { 0 } else { p };
        self.push(
            format!("{name}.conv"),
            own(k * k * c_in * c_out + c_out),
            2 * k * k * c_in * c_out * area,
        );
        if bn {
            self.push(format!("{name}.bn"), own(2 * c_out), c_out * area);
        }
        if relu {
            self.push(format!("{name}.relu"), 0, c_out * area);
        }
        side
    }
}

pub fn count_cost(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let mut b = Builder { layers: Vec::new() };
    let c = config.adjusted_channels as u64;
    let strides = config.stage_strides();

    for (branch, input, shared) in [
        ("search", config.search_size, false),
        ("template", config.template_size, true),
    ] {
        let mut side = input as u64;
        let mut c_in = 3u64;
        for (i, (&ch, &s)) in config.backbone_channels.iter().zip(&strides).enumerate() {
            side = b.conv(
                &format!("backbone.{branch}.{i}"),
                shared,
                c_in,
                ch as u64,
                3,
                s as u64,
                side,
                true,
                true,
            );
            c_in = ch as u64;
        }
        b.conv(&format!("adjust.{branch}"), shared, c_in, c, 1, 1, side, true, false);
    }

    let t = config.template_side() as u64;
    if config.dual_template {
        // two scalings and one add per element
        b.push("dual_template.mix".into(), 1, 3 * c * t * t);
    }
    b.push("template.reduce".into(), 0, c * t * t);

    let s = config.map_side() as u64;
    let cells = config.template_corr_cells as u64;
    b.conv("fusion.search", false, c, c, 3, 1, s, true, true);
    b.push("fusion.correlation".into(), 0, 2 * c * cells * s * s);
    b.conv("fusion.aggregate", false, c + cells, c, 1, 1, s, true, true);

    for (head, out) in [("cls", 1u64), ("reg", 4u64)] {
        for i in 0..config.head_blocks {
            b.conv(&format!("heads.{head}.tower.{i}"), false, c, c, 3, 1, s, true, true);
        }
        b.conv(&format!("heads.{head}.out"), false, c, out, 3, 1, s, false, false);
    }

    let params = b.layers.iter().map(|l| l.params).sum();
    let flops = b.layers.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        params,
        flops,
        convention: FLOP_CONVENTION.to_string(),
        per_layer: b.layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Network;

    #[test]
    fn closed_form_conv_costs() {
        let mut b = Builder { layers: Vec::new() };
        b.conv("a", false, 128, 128, 3, 1, 16, false, false);
        assert_eq!(b.layers[0].params, 147_584);
        assert_eq!(b.layers[0].flops, 75_497_472);
        b.conv("b", false, 144, 128, 1, 1, 16, false, false);
        assert_eq!(b.layers[1].params, 18_560);
        assert_eq!(b.layers[1].flops, 9_437_184);
    }

    #[test]
    fn totals_are_sums_and_match_network() {
        for cfg in [ModelConfig::default(), ModelConfig::toy(), ModelConfig::miniature()] {
            let r = count_cost(&cfg).unwrap();
            assert_eq!(r.params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
            assert_eq!(r.flops, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
            let net = Network::<f32>::new(cfg).unwrap();
            assert_eq!(r.params as usize, net.parameter_count());
        }
    }

    #[test]
    fn stride_sixteen_heads_are_four_times_cheaper() {
        let s16 = count_cost(&ModelConfig::default()).unwrap();
        let s8 = count_cost(&ModelConfig {
            final_stride: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(s8.head_flops(), 4 * s16.head_flops());
        assert!(s16.flops < s8.flops);
    }
}
