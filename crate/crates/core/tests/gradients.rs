//! Analytic gradients against central differences (f64, h = 1e-5, < 1e-4),
//! three shapes per primitive.

mod common;

use std::sync::Arc;

use common::*;
use dwinkit_core::autodiff::{gradcheck, GradcheckOptions, OpKind, PAD_ROW};
use dwinkit_core::{Result, Tape, Tensor, Var};

fn opts() -> GradcheckOptions {
    GradcheckOptions::default()
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let named: Vec<(String, Tensor<f64>)> = inputs.into_iter().enumerate().map(|(i, t)| (format!("in{i}"), t)).collect();
    let report = gradcheck(f, &named, &opts()).unwrap();
    assert!(report.passed(), "{name}: {:?}", report.inputs);
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed).map(|v| v.abs() + 0.5)
}

const SHAPES: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];

#[test]
fn elementwise() {
    for (i, s) in SHAPES.iter().enumerate() {
        let seed = 10 * i as u64;
        check("add", vec![randn(s, seed), randn(s, seed + 1)], |t, v| t.add(v[0], v[1]));
        check("sub", vec![randn(s, seed), randn(s, seed + 1)], |t, v| t.sub(v[0], v[1]));
        check("mul", vec![randn(s, seed), randn(s, seed + 1)], |t, v| t.mul(v[0], v[1]));
        check("div", vec![randn(s, seed), positive(s, seed + 1)], |t, v| t.div(v[0], v[1]));
        check("scale", vec![randn(s, seed)], |t, v| t.scale(v[0], -1.7));
        check("add_scalar", vec![randn(s, seed)], |t, v| t.add_scalar(v[0], 0.3));
        check("gelu", vec![randn(s, seed)], |t, v| t.gelu(v[0]));
        check("sum", vec![randn(s, seed)], |t, v| t.sum(v[0]));
        check("mean", vec![randn(s, seed)], |t, v| t.mean(v[0]));
        check("sum_leading", vec![randn(s, seed)], |t, v| t.sum_leading(v[0]));
    }
}

#[test]
fn matmul_and_linear() {
    for (i, (a, b)) in [(vec![3, 4], vec![4, 5]), (vec![2, 3, 4], vec![4, 2]), (vec![2, 1, 2, 3], vec![3, 3, 2])]
        .into_iter()
        .enumerate()
    {
        let seed = 100 + 10 * i as u64;
        check("matmul", vec![randn(&a, seed), randn(&b, seed + 1)], |t, v| t.matmul(v[0], v[1]));
    }
    for (i, (x, cin, cout)) in [(vec![3, 4], 4, 2), (vec![2, 2, 3], 3, 5), (vec![1, 6], 6, 1)].into_iter().enumerate() {
        let seed = 200 + 10 * i as u64;
        check(
            "linear",
            vec![randn(&x, seed), randn(&[cin, cout], seed + 1), randn(&[cout], seed + 2)],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        );
        check("linear_nobias", vec![randn(&x, seed), randn(&[cin, cout], seed + 1)], |t, v| {
            t.linear(v[0], v[1], None)
        });
    }
}

#[test]
fn softmax_family_and_layer_norm() {
    for (i, s) in [vec![4], vec![3, 5], vec![2, 2, 6]].into_iter().enumerate() {
        let seed = 300 + 10 * i as u64;
        check("softmax", vec![randn(&s, seed)], |t, v| t.softmax_lastdim(v[0]));
        check("log_softmax", vec![randn(&s, seed)], |t, v| t.log_softmax_lastdim(v[0]));
        let c = *s.last().unwrap();
        check(
            "layer_norm",
            vec![randn(&s, seed), randn(&[c], seed + 1), randn(&[c], seed + 2)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        );
    }
}

#[test]
fn shape_ops() {
    for (i, s) in [vec![2, 3, 4], vec![4, 2, 2, 3], vec![3, 5, 2]].into_iter().enumerate() {
        let seed = 400 + 10 * i as u64;
        let n: usize = s.iter().product();
        check("reshape", vec![randn(&s, seed)], move |t, v| t.reshape(v[0], &[n]));
        let mut perm: Vec<usize> = (0..s.len()).rev().collect();
        perm.rotate_left(1);
        let p = perm.clone();
        check("permute", vec![randn(&s, seed)], move |t, v| t.permute(v[0], &p));
        let c = *s.last().unwrap();
        let mut s2 = s.clone();
        *s2.last_mut().unwrap() = 2;
        check("concat", vec![randn(&s, seed), randn(&s2, seed + 1)], |t, v| t.concat_lastdim(&[v[0], v[1]]));
        check("split", vec![randn(&s, seed)], move |t, v| {
            let parts = t.split_lastdim(v[0], &[1, c - 1])?;
            t.concat_lastdim(&[parts[1], parts[0]])
        });
        let r = s.len();
        check("slice", vec![randn(&s, seed)], move |t, v| t.slice(v[0], 0, 1, 1));
        check("pad", vec![randn(&s, seed)], move |t, v| t.pad(v[0], &vec![1; r], &vec![2; r]));
        let start = vec![0; r];
        let mut len = s.clone();
        len[r - 2] -= 1;
        check("crop", vec![randn(&s, seed)], move |t, v| t.crop(v[0], &start, &len));
    }
}

#[test]
fn spatial_ops() {
    for (i, s) in [vec![2, 2, 2, 1], vec![3, 2, 4, 2], vec![4, 4, 3, 3]].into_iter().enumerate() {
        let seed = 500 + 10 * i as u64;
        check("upsample2x", vec![randn(&s, seed)], |t, v| t.upsample2x(v[0]));
        let k = if i == 2 { 5 } else { 3 };
        let c = s[3];
        check("depthwise_conv3d", vec![randn(&s, seed), randn(&[k, k, k, c], seed + 1)], |t, v| {
            t.depthwise_conv3d(v[0], v[1])
        });
        let rows = s[..3].iter().product::<usize>() as u32;
        let index: Arc<Vec<u32>> = Arc::new((0..rows + 3).map(|r| if r % 4 == 3 { PAD_ROW } else { (r * 7) % rows }).collect());
        let out = [index.len(), c];
        check("gather_rows", vec![randn(&s, seed)], move |t, v| t.gather_rows(v[0], index.clone(), &out));
    }
}

#[test]
fn fused_attention() {
    for (i, (b, tok, c, heads)) in [(1, 3, 2, 1), (2, 5, 4, 2), (3, 4, 6, 3)].into_iter().enumerate() {
        let seed = 600 + 10 * i as u64;
        let s = [b, tok, c];
        check("attention", vec![randn(&s, seed), randn(&s, seed + 1), randn(&s, seed + 2)], move |t, v| {
            t.attention(v[0], v[1], v[2], heads)
        });
    }
}

#[test]
fn corrupted_rules_are_caught() {
    for kind in [OpKind::Attention, OpKind::DepthwiseConv3d, OpKind::LayerNorm, OpKind::Linear] {
        let x = randn(&[2, 2, 2, 3], 700);
        let k = randn(&[3, 3, 3, 3], 701);
        let g = randn(&[3], 702);
        let b = randn(&[3], 703);
        let w = randn(&[3, 3], 704);
        let named = vec![
            ("x".to_string(), x),
            ("k".to_string(), k),
            ("g".to_string(), g),
            ("b".to_string(), b),
            ("w".to_string(), w),
        ];
        let report = gradcheck(
            |t, v| {
                t.inject_fault(kind);
                let y = t.depthwise_conv3d(v[0], v[1])?;
                let y = t.layer_norm(y, v[2], v[3], 1e-5)?;
                let y = t.linear(y, v[4], None)?;
                let y = t.reshape(y, &[1, 8, 3])?;
                t.attention(y, y, y, 1)
            },
            &named,
            &opts(),
        )
        .unwrap();
        assert!(!report.passed(), "{kind:?}");
    }
}
