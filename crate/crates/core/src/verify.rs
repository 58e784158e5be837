//! The gradient verification suite: every differentiable operation plus
//! the full two-layer multiway model and the tokenizer objective, checked
//! against central finite differences over many seeds.
//!
//! Shared by the `grad-check` CLI subcommand and the acceptance tests.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::gradcheck::{grad_check, GradReport};
use crate::graph::{Graph, Var};
use crate::layers::{attention, ffn, plain_block, AttentionParams, BlockParams, FfnParams};
use crate::masking::{mask_text, sample_positions};
use crate::model::{
    mdm_loss, multiway_block, MdmBatch, ModalityTag, MultiwayConfig, MultiwayModel,
};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::text::TokenSeq;
use crate::vision::{
    freeze_quantization, patchify, synthetic_teacher_features, synthetic_teacher_map,
    vqkd_objective, VqkdBatch, VqkdConfig, VqkdItem, VqkdModel,
};

pub const SUITE_H: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn randn(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    let mut r = stream(seed, tag);
    Tensor::randn(shape, 1.0, &mut r)
}

/// Scalar loss that mixes every output coordinate with distinct weights so
/// no gradient direction cancels structurally.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let n = g.value(y).len();
    let mut r = stream(seed, "loss-weights");
    let dist = Normal::new(0.0, 1.0).unwrap();
    let w: Vec<f64> = (0..n).map(|_| dist.sample(&mut r)).collect();
    g.dot_const_sum(y, w)
}

fn check<F>(name: &'static str, seeds: u64, build_params: F) -> Result<SuiteEntry>
where
    F: Fn(u64) -> Result<(Vec<Tensor>, BuildFn)>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (params, build) = build_params(seed)?;
        let report: GradReport = grad_check(&params, |g, vars| build(g, vars), SUITE_H, SUITE_TOL)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(SuiteEntry {
        name,
        seeds,
        max_rel_err: worst,
        pass: worst <= SUITE_TOL,
    })
}

type BuildFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_checks(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();

    entries.push(check("matmul", seeds, |s| {
        let a = randn(&[3, 4], s, "mm-a");
        let b = randn(&[4, 2], s, "mm-b");
        Ok((
            vec![a, b],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let c = g.matmul(v[0], v[1])?;
                Ok(weighted_sum(g, c, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("transpose", seeds, |s| {
        let a = randn(&[3, 5], s, "tr-a");
        Ok((
            vec![a],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let t = g.transpose(v[0]);
                let sq = g.mul(t, t);
                Ok(weighted_sum(g, sq, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("add_sub_mul_scale", seeds, |s| {
        let a = randn(&[2, 3], s, "asm-a");
        let b = randn(&[2, 3], s, "asm-b");
        Ok((
            vec![a, b],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let sum = g.add(v[0], v[1]);
                let diff = g.sub(v[0], v[1]);
                let prod = g.mul(sum, diff);
                let scaled = g.scale(prod, 1.7);
                Ok(weighted_sum(g, scaled, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("add_row_broadcast", seeds, |s| {
        let a = randn(&[4, 3], s, "arb-a");
        let b = randn(&[3], s, "arb-b");
        Ok((
            vec![a, b],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.add_row_broadcast(v[0], v[1]);
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("add_mul_const", seeds, |s| {
        let a = randn(&[2, 4], s, "amc-a");
        let c1: Vec<f64> = randn(&[8], s, "amc-c1").data().to_vec();
        let c2: Vec<f64> = randn(&[8], s, "amc-c2").data().to_vec();
        Ok((
            vec![a],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.add_const(v[0], c1.clone());
                let z = g.mul_const(y, c2.clone());
                Ok(weighted_sum(g, z, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("gelu", seeds, |s| {
        let a = randn(&[3, 3], s, "gelu-a");
        Ok((
            vec![a],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.gelu(v[0]);
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("softmax_rows", seeds, |s| {
        let a = randn(&[3, 4], s, "sm-a");
        Ok((
            vec![a],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.softmax(v[0], 1)?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("softmax_axis0", seeds, |s| {
        let a = randn(&[3, 4], s, "sm0-a");
        Ok((
            vec![a],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.softmax(v[0], 0)?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("layer_norm", seeds, |s| {
        let x = randn(&[3, 6], s, "ln-x");
        let gamma = randn(&[6], s, "ln-g");
        let beta = randn(&[6], s, "ln-b");
        Ok((
            vec![x, gamma, beta],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("l2_normalize_rows", seeds, |s| {
        // Keep rows bounded away from the zero-vector kink.
        let mut x = randn(&[3, 4], s, "l2-x");
        for row in 0..3 {
            x.data_mut()[row * 4] += 2.0;
        }
        Ok((
            vec![x],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.l2_normalize_rows(v[0]);
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("gather_scatter_rows", seeds, |s| {
        let table = randn(&[5, 3], s, "gs-t");
        Ok((
            vec![table],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let picked = g.gather_rows(v[0], &[4, 0, 0, 2])?;
                let spread = g.scatter_rows(picked, &[1, 3, 0, 5], 6)?;
                Ok(weighted_sum(g, spread, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("concat_slice", seeds, |s| {
        let a = randn(&[2, 3], s, "cs-a");
        let b = randn(&[2, 3], s, "cs-b");
        Ok((
            vec![a, b],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let rows = g.concat_rows(&[v[0], v[1]]);
                let cols = g.concat_cols(&[v[0], v[1]]);
                let sliced = g.slice_cols(cols, 1, 4);
                let a = weighted_sum(g, rows, s);
                let b = weighted_sum(g, sliced, derive_seed(s, "slice"));
                Ok(g.add(a, b))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("cross_entropy_sum", seeds, |s| {
        let logits = randn(&[4, 5], s, "ce-l");
        let targets = vec![(s as usize) % 5, 0, 4, 2];
        Ok((
            vec![logits],
            Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy_sum(v[0], &targets)) as BuildFn,
        ))
    })?);

    entries.push(check("reduction_ops", seeds, |s| {
        let a = randn(&[3, 3], s, "red-a");
        let c: Vec<f64> = randn(&[9], s, "red-c").data().to_vec();
        let d: Vec<f64> = randn(&[9], s, "red-d").data().to_vec();
        Ok((
            vec![a],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let probe = g.identity(v[0]);
                let dot = g.dot_const_sum(probe, c.clone());
                let dist = g.sq_dist_const_sum(v[0], d.clone());
                let tot = g.sum(v[0]);
                let partial = g.add(dot, dist);
                Ok(g.add(partial, tot))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("attention", seeds, |s| {
        let mut r = stream(s, "attn-params");
        let mut p = AttentionParams::init(6, 0.02, &mut r);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v *= 20.0; // healthy score magnitudes for the check
            }
        }
        let x = randn(&[4, 6], s, "attn-x");
        let mut params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        params.push(x);
        Ok((
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let mut it = v[..v.len() - 1].iter().copied();
                let bound = p.bind_from(&mut it);
                let pad = [false, false, false, true];
                let y = attention(g, v[v.len() - 1], &bound, 2, Some(&pad))?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("ffn", seeds, |s| {
        let mut r = stream(s, "ffn-params");
        let mut p = FfnParams::init(4, 8, 0.02, &mut r);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
        let x = randn(&[3, 4], s, "ffn-x");
        let mut params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        params.push(x);
        Ok((
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let mut it = v[..v.len() - 1].iter().copied();
                let bound = p.bind_from(&mut it);
                let y = ffn(g, v[v.len() - 1], &bound)?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("plain_block", seeds, |s| {
        let mut r = stream(s, "blk-params");
        let mut p = BlockParams::init(4, 8, 0.02, &mut r);
        jitter_tensors(&mut p.tensors_mut(), 0.3, s, "blk-jit");
        let x = randn(&[3, 4], s, "blk-x");
        let mut params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        params.push(x);
        Ok((
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let mut it = v[..v.len() - 1].iter().copied();
                let bound = p.bind_from(&mut it);
                let y = plain_block(g, v[v.len() - 1], &bound, 2, None)?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    Ok(entries)
}

fn jitter_tensors(tensors: &mut [&mut Tensor], std: f64, seed: u64, tag: &str) {
    let mut r = stream(seed, tag);
    let dist = Normal::new(0.0, std).unwrap();
    for t in tensors.iter_mut() {
        for v in t.data_mut() {
            *v += dist.sample(&mut r);
        }
    }
}

fn tiny_multiway_config() -> MultiwayConfig {
    MultiwayConfig {
        layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        fusion_top: 1,
        dropout: 0.0,
        text_vocab: 12,
        visual_vocab: 6,
        n_answers: 4,
        patch: 2,
        channels: 1,
        n_patches: 4,
        max_text_len: 6,
        init_std: 0.02,
    }
}

fn multiway_checks(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();

    entries.push(check("multiway_block_routed", seeds, |s| {
        let config = tiny_multiway_config();
        let mut model = MultiwayModel::init(config.clone(), s)?;
        jitter_tensors(&mut model.tensors_mut(), 0.3, s, "mwb-jit");
        let layer = model.layers[0].clone();
        let x = randn(&[5, 8], s, "mwb-x");
        let tags = vec![
            ModalityTag::Text,
            ModalityTag::Vision,
            ModalityTag::Text,
            ModalityTag::Vision,
            ModalityTag::Vision,
        ];
        let mut params: Vec<Tensor> = layer.tensors().into_iter().cloned().collect();
        params.push(x);
        Ok((
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let mut it = v[..v.len() - 1].iter().copied();
                let bound = layer.bind_from(&mut it);
                let y =
                    multiway_block(g, v[v.len() - 1], &tags, 0, &config, &bound, None, None)?;
                Ok(weighted_sum(g, y, s))
            }) as BuildFn,
        ))
    })?);

    entries.push(check("multiway_full_model", seeds, |s| {
        let config = tiny_multiway_config();
        let mut model = MultiwayModel::init(config, s)?;
        jitter_tensors(&mut model.tensors_mut(), 0.3, s, "mwf-jit");
        let mut r = stream(s, "mwf-img");
        let image = Tensor::rand_uniform(&[4, 4, 1], 0.0, 1.0, &mut r);
        let text = TokenSeq {
            ids: vec![5, 9, 7],
        };
        let text_mask = mask_text(3, 0.5, derive_seed(s, "mwf-tm"))?;
        let patch_mask = sample_positions(4, 2, derive_seed(s, "mwf-pm"));
        let codes = vec![(s as usize) % 6, 0, 4, 1];
        let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        Ok((
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let bound = model.bind_from(&mut v.iter().copied());
                let batch = MdmBatch {
                    image: Some(&image),
                    text: Some(&text),
                    text_mask: text_mask.clone(),
                    patch_mask: patch_mask.clone(),
                    visual_codes: codes.clone(),
                };
                mdm_loss(g, &model, &bound, &batch, None)
            }) as BuildFn,
        ))
    })?);

    Ok(entries)
}

fn vqkd_check(seeds: u64) -> Result<SuiteEntry> {
    check("vqkd_objective_frozen", seeds, |s| {
        let config = VqkdConfig {
            patch: 2,
            channels: 1,
            n_patches: 4,
            d_model: 5,
            n_heads: 1,
            d_ff: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            codebook_size: 3,
            teacher_dim: 5,
            decoder_positions: true,
            init_std: 0.02,
        };
        let mut model = VqkdModel::init(config.clone(), s)?;
        jitter_tensors(&mut model.tensors_mut(), 0.3, s, "vq-jit");
        let mut r = stream(s, "vq-img");
        let image = Tensor::rand_uniform(&[4, 4, 1], 0.0, 1.0, &mut r);
        let grid = patchify(&image, 2)?;
        let teacher_w = synthetic_teacher_map(config.patch_len(), config.teacher_dim, s);
        let teacher = synthetic_teacher_features(&grid, &teacher_w)?;
        let batch = VqkdBatch {
            items: vec![VqkdItem {
                patches: grid.patches,
                teacher,
            }],
        };
        let frozen = freeze_quantization(&model, &batch)?;
        let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        Ok((
            params,
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let bound = model.bind_from(&mut v.iter().copied());
                let handles = vqkd_objective(g, &model, &bound, &batch, Some(&frozen))?;
                Ok(handles.loss)
            }) as BuildFn,
        ))
    })
}

/// Run the whole suite. Every entry must pass for the suite to pass.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries = op_checks(seeds)?;
    entries.extend(multiway_checks(seeds)?);
    entries.push(vqkd_check(seeds)?);
    Ok(entries)
}
