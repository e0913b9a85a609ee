//! Layer plans for the built-in architectures.

use super::{Architecture, ModelConfig};
use crate::nn::{GraphBuilder, Network, NodeId};
use crate::Result;

struct Scale {
    width: f64,
    depth: f64,
}

impl Scale {
    /// Channel count after width scaling, never below 8.
    fn ch(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(8)
    }

    fn repeats(&self, base: usize) -> usize {
        ((base as f64 * self.depth).round() as usize).max(1)
    }
}

pub(super) fn build(config: &ModelConfig) -> Result<Network> {
    let [h, w, c] = config.input_shape;
    let mut g = GraphBuilder::new([c, h, w], config.rng_seed);
    let scale = Scale {
        width: config.width_multiplier,
        depth: config.depth_multiplier,
    };
    let features = match config.architecture {
        Architecture::TinyCnn => tiny_cnn(&mut g, &scale)?,
        Architecture::XceptionStyle => xception(&mut g, &scale)?,
        Architecture::InceptionV3Style => inception_v3(&mut g, &scale)?,
        Architecture::Custom => unreachable!("custom networks are not built from a config"),
    };
    let pooled = g.global_avg_pool("avg_pool", features)?;
    let logits = g.dense("predictions", pooled, config.num_classes)?;
    g.finish(logits)
}

/// Three conv blocks; the last one feeds global pooling directly.
fn tiny_cnn(g: &mut GraphBuilder, s: &Scale) -> Result<NodeId> {
    let x = g.input();
    let x = g.conv("conv1", x, s.ch(8), [3, 3], 2, [1, 1], true)?;
    let x = g.relu("conv1_relu", x)?;
    let x = g.max_pool("pool1", x, 2, 2, 0)?;
    let x = g.conv("conv2", x, s.ch(16), [3, 3], 1, [1, 1], true)?;
    let x = g.relu("conv2_relu", x)?;
    let x = g.max_pool("pool2", x, 2, 2, 0)?;
    let x = g.conv("conv3", x, s.ch(32), [3, 3], 1, [1, 1], true)?;
    g.relu("conv3_relu", x)
}

fn conv_bn_relu(g: &mut GraphBuilder, name: &str, x: NodeId, out: usize, kernel: [usize; 2], stride: usize, padding: [usize; 2]) -> Result<NodeId> {
    let x = g.conv(name, x, out, kernel, stride, padding, false)?;
    let x = g.batch_norm(&format!("{name}_bn"), x)?;
    g.relu(&format!("{name}_act"), x)
}

/// Depthwise 3x3 followed by a pointwise 1x1 and batch norm.
fn sep_conv_bn(g: &mut GraphBuilder, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
    let x = g.depthwise(&format!("{name}_dw"), x, [3, 3], 1, [1, 1], false)?;
    let x = g.conv(name, x, out, [1, 1], 1, [0, 0], false)?;
    g.batch_norm(&format!("{name}_bn"), x)
}

/// Entry/exit-flow block: two separable convs, strided max pool, and a
/// strided 1x1 projection on the shortcut.
fn xception_down_block(g: &mut GraphBuilder, block: usize, x: NodeId, mid: usize, out: usize, pre_act: bool) -> Result<NodeId> {
    let shortcut = g.conv(&format!("block{block}_shortcut"), x, out, [1, 1], 2, [0, 0], false)?;
    let shortcut = g.batch_norm(&format!("block{block}_shortcut_bn"), shortcut)?;
    let mut y = x;
    if pre_act {
        y = g.relu(&format!("block{block}_sepconv1_preact"), y)?;
    }
    let y = sep_conv_bn(g, &format!("block{block}_sepconv1"), y, mid)?;
    let y = g.relu(&format!("block{block}_sepconv2_preact"), y)?;
    let y = sep_conv_bn(g, &format!("block{block}_sepconv2"), y, out)?;
    let y = g.max_pool(&format!("block{block}_pool"), y, 3, 2, 1)?;
    g.add(&format!("block{block}_add"), &[y, shortcut])
}

fn xception(g: &mut GraphBuilder, s: &Scale) -> Result<NodeId> {
    // entry flow
    let x = g.input();
    let x = conv_bn_relu(g, "block1_conv1", x, s.ch(32), [3, 3], 2, [0, 0])?;
    let x = conv_bn_relu(g, "block1_conv2", x, s.ch(64), [3, 3], 1, [0, 0])?;
    let x = xception_down_block(g, 2, x, s.ch(128), s.ch(128), false)?;
    let x = xception_down_block(g, 3, x, s.ch(256), s.ch(256), true)?;
    let mut x = xception_down_block(g, 4, x, s.ch(728), s.ch(728), true)?;

    // middle flow: identity residual blocks of three separable convs
    let middle = s.repeats(8);
    for block in 5..5 + middle {
        let mut y = x;
        for i in 1..=3 {
            y = g.relu(&format!("block{block}_sepconv{i}_preact"), y)?;
            y = sep_conv_bn(g, &format!("block{block}_sepconv{i}"), y, s.ch(728))?;
        }
        x = g.add(&format!("block{block}_add"), &[y, x])?;
    }

    // exit flow
    let exit = 5 + middle;
    let x = xception_down_block(g, exit, x, s.ch(728), s.ch(1024), true)?;
    let last = exit + 1;
    let x = sep_conv_bn(g, &format!("block{last}_sepconv1"), x, s.ch(1536))?;
    let x = g.relu(&format!("block{last}_sepconv1_act"), x)?;
    let x = sep_conv_bn(g, &format!("block{last}_sepconv2"), x, s.ch(2048))?;
    g.relu(&format!("block{last}_sepconv2_act"), x)
}

fn inception_a(g: &mut GraphBuilder, p: &str, x: NodeId, pool_features: usize, s: &Scale) -> Result<NodeId> {
    let b1 = conv_bn_relu(g, &format!("{p}_branch1x1"), x, s.ch(64), [1, 1], 1, [0, 0])?;

    let b2 = conv_bn_relu(g, &format!("{p}_branch5x5_1"), x, s.ch(48), [1, 1], 1, [0, 0])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch5x5_2"), b2, s.ch(64), [5, 5], 1, [2, 2])?;

    let b3 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_1"), x, s.ch(64), [1, 1], 1, [0, 0])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_2"), b3, s.ch(96), [3, 3], 1, [1, 1])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_3"), b3, s.ch(96), [3, 3], 1, [1, 1])?;

    let bp = g.avg_pool(&format!("{p}_branch_pool_avg"), x, 3, 1, 1)?;
    let bp = conv_bn_relu(g, &format!("{p}_branch_pool"), bp, s.ch(pool_features), [1, 1], 1, [0, 0])?;
    g.concat(p, &[b1, b2, b3, bp])
}

/// Grid reduction 35 -> 17.
fn inception_b(g: &mut GraphBuilder, p: &str, x: NodeId, s: &Scale) -> Result<NodeId> {
    let b1 = conv_bn_relu(g, &format!("{p}_branch3x3"), x, s.ch(384), [3, 3], 2, [0, 0])?;

    let b2 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_1"), x, s.ch(64), [1, 1], 1, [0, 0])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_2"), b2, s.ch(96), [3, 3], 1, [1, 1])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_3"), b2, s.ch(96), [3, 3], 2, [0, 0])?;

    let bp = g.max_pool(&format!("{p}_branch_pool"), x, 3, 2, 0)?;
    g.concat(p, &[b1, b2, bp])
}

/// 7x7 convolutions factorised into 1x7 and 7x1 pairs.
fn inception_c(g: &mut GraphBuilder, p: &str, x: NodeId, c7: usize, s: &Scale) -> Result<NodeId> {
    let c7 = s.ch(c7);
    let b1 = conv_bn_relu(g, &format!("{p}_branch1x1"), x, s.ch(192), [1, 1], 1, [0, 0])?;

    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7_1"), x, c7, [1, 1], 1, [0, 0])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7_2"), b2, c7, [1, 7], 1, [0, 3])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7_3"), b2, s.ch(192), [7, 1], 1, [3, 0])?;

    let b3 = conv_bn_relu(g, &format!("{p}_branch7x7dbl_1"), x, c7, [1, 1], 1, [0, 0])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch7x7dbl_2"), b3, c7, [7, 1], 1, [3, 0])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch7x7dbl_3"), b3, c7, [1, 7], 1, [0, 3])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch7x7dbl_4"), b3, c7, [7, 1], 1, [3, 0])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch7x7dbl_5"), b3, s.ch(192), [1, 7], 1, [0, 3])?;

    let bp = g.avg_pool(&format!("{p}_branch_pool_avg"), x, 3, 1, 1)?;
    let bp = conv_bn_relu(g, &format!("{p}_branch_pool"), bp, s.ch(192), [1, 1], 1, [0, 0])?;
    g.concat(p, &[b1, b2, b3, bp])
}

/// Grid reduction 17 -> 8.
fn inception_d(g: &mut GraphBuilder, p: &str, x: NodeId, s: &Scale) -> Result<NodeId> {
    let b1 = conv_bn_relu(g, &format!("{p}_branch3x3_1"), x, s.ch(192), [1, 1], 1, [0, 0])?;
    let b1 = conv_bn_relu(g, &format!("{p}_branch3x3_2"), b1, s.ch(320), [3, 3], 2, [0, 0])?;

    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7x3_1"), x, s.ch(192), [1, 1], 1, [0, 0])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7x3_2"), b2, s.ch(192), [1, 7], 1, [0, 3])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7x3_3"), b2, s.ch(192), [7, 1], 1, [3, 0])?;
    let b2 = conv_bn_relu(g, &format!("{p}_branch7x7x3_4"), b2, s.ch(192), [3, 3], 2, [0, 0])?;

    let bp = g.max_pool(&format!("{p}_branch_pool"), x, 3, 2, 0)?;
    g.concat(p, &[b1, b2, bp])
}

/// Expanded filter bank with parallel 1x3 / 3x1 splits.
fn inception_e(g: &mut GraphBuilder, p: &str, x: NodeId, s: &Scale) -> Result<NodeId> {
    let b1 = conv_bn_relu(g, &format!("{p}_branch1x1"), x, s.ch(320), [1, 1], 1, [0, 0])?;

    let b2 = conv_bn_relu(g, &format!("{p}_branch3x3_1"), x, s.ch(384), [1, 1], 1, [0, 0])?;
    let b2a = conv_bn_relu(g, &format!("{p}_branch3x3_2a"), b2, s.ch(384), [1, 3], 1, [0, 1])?;
    let b2b = conv_bn_relu(g, &format!("{p}_branch3x3_2b"), b2, s.ch(384), [3, 1], 1, [1, 0])?;

    let b3 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_1"), x, s.ch(448), [1, 1], 1, [0, 0])?;
    let b3 = conv_bn_relu(g, &format!("{p}_branch3x3dbl_2"), b3, s.ch(384), [3, 3], 1, [1, 1])?;
    let b3a = conv_bn_relu(g, &format!("{p}_branch3x3dbl_3a"), b3, s.ch(384), [1, 3], 1, [0, 1])?;
    let b3b = conv_bn_relu(g, &format!("{p}_branch3x3dbl_3b"), b3, s.ch(384), [3, 1], 1, [1, 0])?;

    let bp = g.avg_pool(&format!("{p}_branch_pool_avg"), x, 3, 1, 1)?;
    let bp = conv_bn_relu(g, &format!("{p}_branch_pool"), bp, s.ch(192), [1, 1], 1, [0, 0])?;
    g.concat(p, &[b1, b2a, b2b, b3a, b3b, bp])
}

fn inception_v3(g: &mut GraphBuilder, s: &Scale) -> Result<NodeId> {
    let x = g.input();
    let x = conv_bn_relu(g, "conv2d_1a_3x3", x, s.ch(32), [3, 3], 2, [0, 0])?;
    let x = conv_bn_relu(g, "conv2d_2a_3x3", x, s.ch(32), [3, 3], 1, [0, 0])?;
    let x = conv_bn_relu(g, "conv2d_2b_3x3", x, s.ch(64), [3, 3], 1, [1, 1])?;
    let x = g.max_pool("maxpool_3a", x, 3, 2, 0)?;
    let x = conv_bn_relu(g, "conv2d_3b_1x1", x, s.ch(80), [1, 1], 1, [0, 0])?;
    let x = conv_bn_relu(g, "conv2d_4a_3x3", x, s.ch(192), [3, 3], 1, [0, 0])?;
    let mut x = g.max_pool("maxpool_5a", x, 3, 2, 0)?;

    for (i, pool_features) in [32, 64, 64].into_iter().take(s.repeats(3)).enumerate() {
        x = inception_a(g, &format!("mixed_5{}", (b'b' + i as u8) as char), x, pool_features, s)?;
    }
    x = inception_b(g, "mixed_6a", x, s)?;
    for (i, c7) in [128, 160, 160, 192].into_iter().take(s.repeats(4)).enumerate() {
        x = inception_c(g, &format!("mixed_6{}", (b'b' + i as u8) as char), x, c7, s)?;
    }
    x = inception_d(g, "mixed_7a", x, s)?;
    for i in 0..s.repeats(2) {
        x = inception_e(g, &format!("mixed_7{}", (b'b' + i as u8) as char), x, s)?;
    }
    Ok(x)
}
