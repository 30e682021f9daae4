//! Expected shape traces rebuilt from convolution arithmetic.
#![allow(dead_code)]

use covsev_core::arch3d::HybridDeCoVNetConfig;

pub fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

pub fn entry(name: &str, shape: &[usize]) -> (String, Vec<usize>) {
    (name.to_string(), shape.to_vec())
}

pub fn expected_3d(cfg: &HybridDeCoVNetConfig, batch: usize) -> Vec<(String, Vec<usize>)> {
    let [d, h, w] = cfg.input_dims.unwrap();
    let s = &cfg.stem;
    let mut dims = [
        conv_out(d, s.kernel[0], s.stride[0], s.padding[0]),
        conv_out(h, s.kernel[1], s.stride[1], s.padding[1]),
        conv_out(w, s.kernel[2], s.stride[2], s.padding[2]),
    ];
    let mut trace = vec![
        entry("input", &[batch, s.in_channels, d, h, w]),
        entry("stem", &[batch, s.out_channels, dims[0], dims[1], dims[2]]),
    ];
    for (i, &c) in cfg.channels.iter().enumerate() {
        // first 3x3x3 conv of each layer has stride 2, padding 1
        dims = dims.map(|n| conv_out(n, 3, 2, 1));
        trace.push(entry(
            &format!("layer{}", i + 1),
            &[batch, c, dims[0], dims[1], dims[2]],
        ));
    }
    let [pd, ph, pw] = cfg.head_pool;
    let last = *cfg.channels.last().unwrap();
    let head = *cfg.head_channels.last().unwrap();
    trace.push(entry("head/adaptive_pool", &[batch, last, pd, ph, pw]));
    trace.push(entry("head/convs", &[batch, head, pd, ph, pw]));
    trace.push(entry("head/features", &[batch, head]));
    trace.push(entry("logits", &[batch, 4]));
    trace
}
