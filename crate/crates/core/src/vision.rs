//! Patchification and the VQ-KD visual tokenizer.
//!
//! The tokenizer maps an image to discrete codes: a small transformer
//! encoder produces per-patch vectors, a quantizer snaps each vector to its
//! nearest codebook entry under ℓ2-normalized distance, and a decoder
//! reconstructs frozen teacher features from the selected code embeddings.
//! Training maximizes decoder/teacher cosine similarity while pulling codes
//! and encoder outputs together through stop-gradient penalty terms; the
//! quantization step itself passes gradients straight through.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{plain_block, BlockParams, BoundBlock};
use crate::rng;
use crate::tensor::{l2_normalize_row, matmul, Tensor};

// ── patch grid ──────────────────────────────────────────────────────────

/// An image reshaped into N = HW/P² flattened P×P×C blocks, row-major.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

pub fn patchify(image: &Tensor, patch: usize) -> Result<PatchGrid> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "patchify expects an HxWxC image, got shape {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::PatchSize { h, w, p: patch });
    }
    let (grid_h, grid_w) = (h / patch, w / patch);
    let plen = patch * patch * c;
    let mut data = Vec::with_capacity(grid_h * grid_w * plen);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            for pr in 0..patch {
                for pc in 0..patch {
                    let (row, col) = (gr * patch + pr, gc * patch + pc);
                    let base = (row * w + col) * c;
                    data.extend_from_slice(&image.data()[base..base + c]);
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![grid_h * grid_w, plen], data)?,
        grid_h,
        grid_w,
        patch,
        channels: c,
    })
}

/// Inverse of [`patchify`]; test helper for the exact-reconstruction check.
pub fn unpatchify(grid: &PatchGrid) -> Tensor {
    let (p, c) = (grid.patch, grid.channels);
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let mut data = vec![0.0; h * w * c];
    for gr in 0..grid.grid_h {
        for gc in 0..grid.grid_w {
            let patch = grid.patches.row(gr * grid.grid_w + gc);
            for pr in 0..p {
                for pc in 0..p {
                    let (row, col) = (gr * p + pr, gc * p + pc);
                    let src = (pr * p + pc) * c;
                    let dst = (row * w + col) * c;
                    data[dst..dst + c].copy_from_slice(&patch[src..src + c]);
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], data).unwrap()
}

/// Linear patch embedding plus learned absolute positions.
pub fn embed_patches(grid: &PatchGrid, w_proj: &Tensor, pos_emb: &Tensor) -> Result<Tensor> {
    let projected = matmul(&grid.patches, w_proj)?;
    if pos_emb.shape() != projected.shape() {
        return Err(Error::ShapeMismatch {
            op: "embed_patches",
            lhs: projected.shape().to_vec(),
            rhs: pos_emb.shape().to_vec(),
        });
    }
    let data = projected
        .data()
        .iter()
        .zip(pos_emb.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(projected.shape().to_vec(), data)
}

// ── codebook and quantization ───────────────────────────────────────────

/// The visual vocabulary: K code embeddings of dimension D.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub embeddings: Tensor,
}

impl Codebook {
    /// Codes start uniform on the unit sphere; lookup operates on
    /// ℓ2-normalized vectors.
    pub fn init(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Codebook> {
        if k < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
        }
        Ok(Codebook {
            embeddings: Tensor::rand_unit_rows(k, d, rng).with_grad(),
        })
    }

    pub fn from_tensor(embeddings: Tensor) -> Result<Codebook> {
        if embeddings.shape().len() != 2 || embeddings.shape()[0] < 2 {
            return Err(Error::Config(format!(
                "codebook shape {:?} invalid",
                embeddings.shape()
            )));
        }
        Ok(Codebook { embeddings })
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualTokenSeq {
    pub codes: Vec<usize>,
}

/// Nearest-neighbor code per row of `h` under ℓ2-normalized Euclidean
/// distance; ties resolve to the lowest index.
pub fn quantize(h: &Tensor, codebook: &Codebook) -> Result<VisualTokenSeq> {
    if h.cols() != codebook.dim() {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: h.shape().to_vec(),
            rhs: codebook.embeddings.shape().to_vec(),
        });
    }
    let normed_codes: Vec<Vec<f64>> = (0..codebook.k())
        .map(|j| l2_normalize_row(codebook.embeddings.row(j)))
        .collect();
    let codes = (0..h.rows())
        .map(|i| {
            let hn = l2_normalize_row(h.row(i));
            let mut best = (0usize, f64::INFINITY);
            for (j, vn) in normed_codes.iter().enumerate() {
                let dist: f64 = hn
                    .iter()
                    .zip(vn)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect();
    Ok(VisualTokenSeq { codes })
}

// ── tokenizer model ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct VqkdConfig {
    pub patch: usize,
    pub channels: usize,
    pub n_patches: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub codebook_size: usize,
    pub teacher_dim: usize,
    /// Learned absolute positions inside the decoder; disable to make it
    /// permutation-equivariant over the code sequence.
    pub decoder_positions: bool,
    /// Init scale for projection weights.
    pub init_std: f64,
}

impl VqkdConfig {
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "vqkd d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("vqkd codebook needs K >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VqkdModel {
    pub config: VqkdConfig,
    pub w_proj: Tensor,
    pub pos: Tensor,
    pub enc_blocks: Vec<BlockParams>,
    pub codebook: Codebook,
    pub dec_pos: Option<Tensor>,
    pub dec_blocks: Vec<BlockParams>,
    /// Output projection to teacher space; absent when dims already agree.
    pub dec_out: Option<(Tensor, Tensor)>,
}

pub struct BoundVqkd {
    pub w_proj: Var,
    pub pos: Var,
    pub enc_blocks: Vec<BoundBlock>,
    pub codebook: Var,
    pub dec_pos: Option<Var>,
    pub dec_blocks: Vec<BoundBlock>,
    pub dec_out: Option<(Var, Var)>,
}

impl VqkdModel {
    pub fn init(config: VqkdConfig, seed: u64) -> Result<VqkdModel> {
        config.validate()?;
        let mut r = rng::stream(seed, "vqkd-init");
        let std = config.init_std;
        let plen = config.patch_len();
        let w_proj = Tensor::randn(&[plen, config.d_model], std, &mut r).with_grad();
        let pos =
            Tensor::randn(&[config.n_patches, config.d_model], std, &mut r).with_grad();
        let enc_blocks = (0..config.encoder_depth)
            .map(|_| BlockParams::init(config.d_model, config.d_ff, std, &mut r))
            .collect();
        let codebook = Codebook::init(config.codebook_size, config.d_model, &mut r)?;
        let dec_pos = config.decoder_positions.then(|| {
            Tensor::randn(&[config.n_patches, config.d_model], std, &mut r).with_grad()
        });
        let dec_blocks = (0..config.decoder_depth)
            .map(|_| BlockParams::init(config.d_model, config.d_ff, std, &mut r))
            .collect();
        let dec_out = (config.teacher_dim != config.d_model).then(|| {
            (
                Tensor::randn(&[config.d_model, config.teacher_dim], std, &mut r)
                    .with_grad(),
                Tensor::zeros(&[config.teacher_dim]).with_grad(),
            )
        });
        Ok(VqkdModel {
            config,
            w_proj,
            pos,
            enc_blocks,
            codebook,
            dec_pos,
            dec_blocks,
            dec_out,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![&self.w_proj, &self.pos];
        for b in &self.enc_blocks {
            t.extend(b.tensors());
        }
        t.push(&self.codebook.embeddings);
        if let Some(p) = &self.dec_pos {
            t.push(p);
        }
        for b in &self.dec_blocks {
            t.extend(b.tensors());
        }
        if let Some((w, b)) = &self.dec_out {
            t.push(w);
            t.push(b);
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![&mut self.w_proj, &mut self.pos];
        for b in &mut self.enc_blocks {
            t.extend(b.tensors_mut());
        }
        t.push(&mut self.codebook.embeddings);
        if let Some(p) = &mut self.dec_pos {
            t.push(p);
        }
        for b in &mut self.dec_blocks {
            t.extend(b.tensors_mut());
        }
        if let Some((w, b)) = &mut self.dec_out {
            t.push(w);
            t.push(b);
        }
        t
    }

    /// Checkpoint names aligned with [`VqkdModel::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        let mut n = vec!["vqkd.w_proj".to_string(), "vqkd.pos".to_string()];
        for (i, _) in self.enc_blocks.iter().enumerate() {
            n.extend(BlockParams::names(&format!("vqkd.enc{i}")));
        }
        n.push("vqkd.codebook".to_string());
        if self.dec_pos.is_some() {
            n.push("vqkd.dec_pos".to_string());
        }
        for (i, _) in self.dec_blocks.iter().enumerate() {
            n.extend(BlockParams::names(&format!("vqkd.dec{i}")));
        }
        if self.dec_out.is_some() {
            n.push("vqkd.dec_out.w".to_string());
            n.push("vqkd.dec_out.b".to_string());
        }
        n
    }

    pub fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundVqkd {
        BoundVqkd {
            w_proj: vars.next().unwrap(),
            pos: vars.next().unwrap(),
            enc_blocks: self.enc_blocks.iter().map(|b| b.bind_from(vars)).collect(),
            codebook: vars.next().unwrap(),
            dec_pos: self.dec_pos.as_ref().map(|_| vars.next().unwrap()),
            dec_blocks: self.dec_blocks.iter().map(|b| b.bind_from(vars)).collect(),
            dec_out: self
                .dec_out
                .as_ref()
                .map(|_| (vars.next().unwrap(), vars.next().unwrap())),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> (BoundVqkd, Vec<Var>) {
        let vars: Vec<Var> = self.tensors().iter().map(|t| g.leaf(t)).collect();
        let bound = self.bind_from(&mut vars.iter().copied());
        (bound, vars)
    }

    /// Encoder forward: patch rows → per-patch vectors h.
    pub fn encode_patches(
        &self,
        g: &mut Graph,
        bound: &BoundVqkd,
        patches: &Tensor,
    ) -> Result<Var> {
        let x = g.leaf(patches);
        let projected = g.matmul(x, bound.w_proj)?;
        let mut h = g.add(projected, bound.pos);
        for block in &bound.enc_blocks {
            h = plain_block(g, h, block, self.config.n_heads, None)?;
        }
        Ok(h)
    }

    /// Decoder forward from an [N×D] input node.
    pub fn decode(&self, g: &mut Graph, bound: &BoundVqkd, input: Var) -> Result<Var> {
        let mut x = input;
        if let Some(pos) = bound.dec_pos {
            x = g.add(x, pos);
        }
        for block in &bound.dec_blocks {
            x = plain_block(g, x, block, self.config.n_heads, None)?;
        }
        if let Some((w, b)) = bound.dec_out {
            let projected = g.matmul(x, w)?;
            x = g.add_row_broadcast(projected, b);
        }
        Ok(x)
    }

    /// Tokenize an image outside any training graph.
    pub fn tokenize(&self, grid: &PatchGrid) -> Result<VisualTokenSeq> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g);
        let h = self.encode_patches(&mut g, &bound, &grid.patches)?;
        let h_t = Tensor::new(g.shape(h).to_vec(), g.value(h).to_vec())?;
        quantize(&h_t, &self.codebook)
    }
}

/// Decode a code sequence to teacher-space vectors outside training.
pub fn decode_tokens(tokens: &VisualTokenSeq, model: &VqkdModel) -> Result<Tensor> {
    for &c in &tokens.codes {
        if c >= model.codebook.k() {
            return Err(Error::Range {
                what: "visual code",
                index: c,
                size: model.codebook.k(),
            });
        }
    }
    let mut g = Graph::new();
    let (bound, _) = model.bind(&mut g);
    let gathered = g.gather_rows(bound.codebook, &tokens.codes)?;
    let normed = g.l2_normalize_rows(gathered);
    let out = model.decode(&mut g, &bound, normed)?;
    Tensor::new(g.shape(out).to_vec(), g.value(out).to_vec())
}

// ── training objective ──────────────────────────────────────────────────

/// One tokenizer-training batch: patch rows plus frozen teacher features.
#[derive(Debug, Clone)]
pub struct VqkdBatch {
    pub items: Vec<VqkdItem>,
}

#[derive(Debug, Clone)]
pub struct VqkdItem {
    pub patches: Tensor,
    pub teacher: Tensor,
}

/// Quantities frozen at the current parameters so finite differences stay
/// on one smooth branch: code assignments and both stop-gradient operands.
#[derive(Debug, Clone)]
pub struct FrozenQuant {
    pub codes: Vec<Vec<usize>>,
    pub encoder_l2: Vec<Vec<f64>>,
    pub code_l2: Vec<Vec<f64>>,
}

/// Graph handles the objective exposes for inspection.
pub struct VqkdHandles {
    pub loss: Var,
    /// Per image: (encoder ℓ2 output probe, decoder input).
    pub pass_through: Vec<(Var, Var)>,
    pub codes: Vec<Vec<usize>>,
}

/// Build the tokenizer objective on `g`, negated into a minimization
/// target: Σ_x Σ_i [ −cos(o_i, t_i) + ‖sg[ℓ2(h_i)] − ℓ2(v_{z_i})‖² +
/// ‖ℓ2(h_i) − sg[ℓ2(v_{z_i})]‖² ].
///
/// The encoder sees gradients through the commitment term and through the
/// straight-through path; the codebook only through the middle term. A
/// `frozen` snapshot replays the same assignments and stop-gradient
/// constants on a perturbed graph, which is what the finite-difference
/// oracle requires.
pub fn vqkd_objective(
    g: &mut Graph,
    model: &VqkdModel,
    bound: &BoundVqkd,
    batch: &VqkdBatch,
    frozen: Option<&FrozenQuant>,
) -> Result<VqkdHandles> {
    if batch.items.is_empty() {
        return Err(Error::Contract("vqkd batch is empty".into()));
    }
    let mut total: Option<Var> = None;
    let mut pass_through = Vec::new();
    let mut all_codes = Vec::new();

    for (idx, item) in batch.items.iter().enumerate() {
        let n = item.patches.rows();
        if item.teacher.rows() != n {
            return Err(Error::Contract(format!(
                "teacher features for image {idx}: {} rows for {n} patches",
                item.teacher.rows()
            )));
        }
        let h = model.encode_patches(g, bound, &item.patches)?;
        let hn = g.l2_normalize_rows(h);
        let hn_value = g.value(hn).to_vec();

        let codes = match frozen {
            Some(f) => f.codes[idx].clone(),
            None => {
                let h_t = Tensor::new(g.shape(hn).to_vec(), hn_value.clone())?;
                // hn is already normalized; quantize re-normalizes, a no-op.
                quantize(&h_t, &model.codebook)?.codes
            }
        };

        let gathered = g.gather_rows(bound.codebook, &codes)?;
        let vqn = g.l2_normalize_rows(gathered);
        let vqn_value = g.value(vqn).to_vec();

        let (sg_hn, sg_vqn) = match frozen {
            Some(f) => (f.encoder_l2[idx].clone(), f.code_l2[idx].clone()),
            None => (hn_value, vqn_value.clone()),
        };

        // Straight-through decoder input: forwards ℓ2(v_z), hands its
        // gradient to the encoder output. Under a frozen snapshot the same
        // point is reached by hn + (sg_vqn − sg_hn), a smooth map with the
        // identical value and gradient there.
        let probe = g.identity(hn);
        let dec_in = match frozen {
            None => g.straight_through(probe, vqn_value),
            Some(_) => {
                let offset: Vec<f64> =
                    sg_vqn.iter().zip(&sg_hn).map(|(v, h)| v - h).collect();
                g.add_const(probe, offset)
            }
        };

        let o = model.decode(g, bound, dec_in)?;
        let on = g.l2_normalize_rows(o);
        let teacher_l2: Vec<f64> = (0..n)
            .flat_map(|i| l2_normalize_row(item.teacher.row(i)))
            .collect();
        let cos_sum = g.dot_const_sum(on, teacher_l2);

        let codebook_term = g.sq_dist_const_sum(vqn, sg_hn);
        let commit_term = g.sq_dist_const_sum(hn, sg_vqn);

        let neg_cos = g.scale(cos_sum, -1.0);
        let partial = g.add(neg_cos, codebook_term);
        let image_loss = g.add(partial, commit_term);
        total = Some(match total {
            None => image_loss,
            Some(t) => g.add(t, image_loss),
        });
        pass_through.push((probe, dec_in));
        all_codes.push(codes);
    }

    Ok(VqkdHandles {
        loss: total.unwrap(),
        pass_through,
        codes: all_codes,
    })
}

/// Capture code assignments and stop-gradient operands at the current
/// parameters, for finite-difference validation.
pub fn freeze_quantization(model: &VqkdModel, batch: &VqkdBatch) -> Result<FrozenQuant> {
    let mut g = Graph::new();
    let (bound, _) = model.bind(&mut g);
    let handles = vqkd_objective(&mut g, model, &bound, batch, None)?;
    let encoder_l2 = handles
        .pass_through
        .iter()
        .map(|&(probe, _)| g.value(probe).to_vec())
        .collect();
    let code_l2 = handles
        .codes
        .iter()
        .map(|codes| {
            codes
                .iter()
                .flat_map(|&c| l2_normalize_row(model.codebook.embeddings.row(c)))
                .collect()
        })
        .collect();
    Ok(FrozenQuant {
        codes: handles.codes,
        encoder_l2,
        code_l2,
    })
}

/// Frozen random linear map of patches standing in for a pretrained
/// teacher model.
pub fn synthetic_teacher_map(patch_len: usize, teacher_dim: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "teacher");
    Tensor::randn(&[patch_len, teacher_dim], 1.0, &mut r)
}

pub fn synthetic_teacher_features(grid: &PatchGrid, teacher_w: &Tensor) -> Result<Tensor> {
    matmul(&grid.patches, teacher_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn toy_image(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "img");
        Tensor::rand_uniform(&[h, w, c], 0.0, 1.0, &mut r)
    }

    #[test]
    fn patchify_224_gives_14x14_grid() {
        let img = Tensor::zeros(&[224, 224, 3]);
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(grid.n_patches(), 196);
        assert_eq!((grid.grid_h, grid.grid_w), (14, 14));
        assert_eq!(grid.patches.shape(), &[196, 768]);
    }

    #[test]
    fn patchify_8x8_p4() {
        let img = toy_image(8, 8, 1, 0);
        let grid = patchify(&img, 4).unwrap();
        assert_eq!(grid.n_patches(), 4);
        assert_eq!(grid.patches.shape(), &[4, 16]);
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Tensor::zeros(&[10, 10, 1]);
        let err = patchify(&img, 4).unwrap_err().to_string();
        assert!(err.contains("10") && err.contains('4'), "{err}");
    }

    #[test]
    fn unpatchify_is_exact_inverse() {
        let img = toy_image(12, 8, 3, 5);
        let grid = patchify(&img, 4).unwrap();
        let back = unpatchify(&grid);
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn embed_patches_zero_weights() {
        let grid = patchify(&toy_image(8, 8, 1, 1), 4).unwrap();
        let w = Tensor::zeros(&[16, 6]);
        let pos = Tensor::zeros(&[4, 6]);
        let out = embed_patches(&grid, &w, &pos).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_patches_identity_projection() {
        let grid = patchify(&toy_image(4, 4, 1, 2), 4).unwrap();
        // 16 → 20 projection whose top 16x16 block is the identity.
        let mut w = Tensor::zeros(&[16, 20]);
        for i in 0..16 {
            w.data_mut()[i * 20 + i] = 1.0;
        }
        let pos = Tensor::zeros(&[1, 20]);
        let out = embed_patches(&grid, &w, &pos).unwrap();
        assert_eq!(&out.data()[..16], grid.patches.data());
        assert!(out.data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_patches_matches_brute_force_rows() {
        let grid = patchify(&toy_image(8, 8, 1, 3), 4).unwrap();
        let mut r = rng::stream(4, "emb");
        let w = Tensor::randn(&[16, 6], 1.0, &mut r);
        let pos = Tensor::randn(&[4, 6], 1.0, &mut r);
        let out = embed_patches(&grid, &w, &pos).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut dot = 0.0;
                for k in 0..16 {
                    dot += grid.patches.at(i, k) * w.at(k, j);
                }
                assert!((out.at(i, j) - (dot + pos.at(i, j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantize_exact_match_and_tie_rule() {
        let cb = Codebook::from_tensor(
            Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        // Row equal to code 2 → index 2.
        let h = Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap();
        assert_eq!(quantize(&h, &cb).unwrap().codes, vec![2]);
        // Codes 1 and 3 are identical; nearest of both → lower index 1.
        let h = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(quantize(&h, &cb).unwrap().codes, vec![1]);
    }

    #[test]
    fn quantize_agrees_with_cosine_argmax() {
        let mut r = rng::stream(9, "quant-oracle");
        for trial in 0..50 {
            let k = [2usize, 8, 64][trial % 3];
            let cb = Codebook::init(k, 5, &mut r).unwrap();
            let h = Tensor::randn(&[20, 5], 1.0, &mut r);
            let got = quantize(&h, &cb).unwrap();
            for (i, &code) in got.codes.iter().enumerate() {
                let hi = h.row(i);
                let hnorm = hi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut best = (0usize, f64::NEG_INFINITY);
                for j in 0..k {
                    let vj = cb.embeddings.row(j);
                    let vnorm = vj.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos =
                        hi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() / (hnorm * vnorm);
                    if cos > best.1 {
                        best = (j, cos);
                    }
                }
                assert_eq!(code, best.0, "trial {trial} row {i}");
            }
        }
    }

    fn tiny_config() -> VqkdConfig {
        VqkdConfig {
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
            init_std: crate::layers::INIT_STD,
        }
    }

    fn tiny_batch(model: &VqkdModel, images: usize) -> VqkdBatch {
        let teacher_w =
            synthetic_teacher_map(model.config.patch_len(), model.config.teacher_dim, 77);
        let items = (0..images)
            .map(|i| {
                let grid = patchify(&toy_image(4, 4, 1, 100 + i as u64), 2).unwrap();
                let teacher = synthetic_teacher_features(&grid, &teacher_w).unwrap();
                VqkdItem {
                    patches: grid.patches,
                    teacher,
                }
            })
            .collect();
        VqkdBatch { items }
    }

    #[test]
    fn identity_decoder_passes_codes_through() {
        let config = VqkdConfig {
            decoder_depth: 0,
            decoder_positions: false,
            ..tiny_config()
        };
        let model = VqkdModel::init(config, 0).unwrap();
        let tokens = VisualTokenSeq {
            codes: vec![2, 0, 1, 2],
        };
        let out = decode_tokens(&tokens, &model).unwrap();
        for (i, &c) in tokens.codes.iter().enumerate() {
            let expect = l2_normalize_row(model.codebook.embeddings.row(c));
            for (a, e) in out.row(i).iter().zip(&expect) {
                assert_eq!(a.to_bits(), e.to_bits());
            }
        }
    }

    #[test]
    fn equal_codes_decode_to_equal_rows_without_positions() {
        let config = VqkdConfig {
            decoder_positions: false,
            ..tiny_config()
        };
        let model = VqkdModel::init(config, 1).unwrap();
        let tokens = VisualTokenSeq {
            codes: vec![1, 1, 1, 1],
        };
        let out = decode_tokens(&tokens, &model).unwrap();
        for r in 1..4 {
            for c in 0..5 {
                assert!((out.at(0, c) - out.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_layer_decoder_matches_golden_run() {
        // Frozen reference output of the seed-0 model on a fixed code
        // sequence, recorded after the finite-difference suite first
        // verified this path.
        let model = VqkdModel::init(tiny_config(), 0).unwrap();
        let out = decode_tokens(
            &VisualTokenSeq {
                codes: vec![0, 2, 1, 0],
            },
            &model,
        )
        .unwrap();
        let golden = [
            4.46852471231582726e-1,
            3.73944306630208945e-1,
            -6.18300054024325113e-2,
            -6.31549074620428197e-1,
            -5.33680460309618909e-1,
            -3.41251997499017912e-1,
            -4.21625823278279299e-1,
            4.10544891438952231e-1,
            3.53139278309372251e-1,
            6.64656293302132273e-1,
            -9.80655781158695505e-2,
            -3.66283548289228156e-1,
            -5.27408685964663393e-1,
            -6.17644490415736991e-1,
            3.68037967662228738e-1,
            4.33373622234914435e-1,
            3.72281140805887201e-1,
            2.01640916639168194e-3,
            -6.22096026000233171e-1,
            -5.25337643588958958e-1,
        ];
        assert_eq!(out.numel(), golden.len());
        for (a, e) in out.data().iter().zip(&golden) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn decode_rejects_out_of_range_code() {
        let model = VqkdModel::init(tiny_config(), 2).unwrap();
        let tokens = VisualTokenSeq { codes: vec![0, 9] };
        assert!(decode_tokens(&tokens, &model).is_err());
    }

    #[test]
    fn objective_at_optimum_is_minus_n_per_image() {
        // o_i == t_i and ℓ2(h_i) == ℓ2(v_{z_i}): cosine saturates, the
        // penalties vanish, so the loss is −N for one image. Arranged with
        // a passthrough encoder/decoder and teacher rows equal to the
        // normalized selected codes.
        let config = VqkdConfig {
            encoder_depth: 0,
            decoder_depth: 0,
            decoder_positions: false,
            ..tiny_config()
        };
        let mut model = VqkdModel::init(config, 3).unwrap();
        model.w_proj = Tensor::zeros(&[4, 5]).with_grad();
        let code_rows: Vec<f64> = (0..4)
            .flat_map(|i| model.codebook.embeddings.row(i % 3).to_vec())
            .collect();
        model.pos = Tensor::new(vec![4, 5], code_rows).unwrap().with_grad();
        let teacher_rows: Vec<f64> = (0..4)
            .flat_map(|i| l2_normalize_row(model.codebook.embeddings.row(i % 3)))
            .collect();
        let grid = patchify(&toy_image(4, 4, 1, 50), 2).unwrap();
        let batch = VqkdBatch {
            items: vec![VqkdItem {
                patches: grid.patches,
                teacher: Tensor::new(vec![4, 5], teacher_rows).unwrap(),
            }],
        };
        let mut g = Graph::new();
        let (bound, _) = model.bind(&mut g);
        let handles = vqkd_objective(&mut g, &model, &bound, &batch, None).unwrap();
        assert!((g.scalar(handles.loss) + 4.0).abs() < 1e-9);
    }

    #[test]
    fn straight_through_gradient_is_bitwise_identical() {
        let model = VqkdModel::init(tiny_config(), 4).unwrap();
        let batch = tiny_batch(&model, 2);
        let mut g = Graph::new();
        let (bound, _) = model.bind(&mut g);
        let handles = vqkd_objective(&mut g, &model, &bound, &batch, None).unwrap();
        g.backward(handles.loss).unwrap();
        for &(probe, dec_in) in &handles.pass_through {
            let gp = g.grad(probe);
            let gd = g.grad(dec_in);
            assert!(gd.iter().any(|&v| v != 0.0));
            for (a, b) in gp.iter().zip(gd) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn codebook_gradient_zero_for_unselected_codes() {
        let config = VqkdConfig {
            codebook_size: 8,
            ..tiny_config()
        };
        let model = VqkdModel::init(config, 5).unwrap();
        let batch = tiny_batch(&model, 2);
        let mut g = Graph::new();
        let (bound, _) = model.bind(&mut g);
        let handles = vqkd_objective(&mut g, &model, &bound, &batch, None).unwrap();
        g.backward(handles.loss).unwrap();
        let selected: std::collections::HashSet<usize> =
            handles.codes.iter().flatten().copied().collect();
        let grad = g.grad(bound.codebook);
        let d = model.codebook.dim();
        for j in 0..model.codebook.k() {
            let row = &grad[j * d..(j + 1) * d];
            if selected.contains(&j) {
                assert!(
                    row.iter().any(|&v| v != 0.0),
                    "code {j} selected but zero grad"
                );
            } else {
                assert!(
                    row.iter().all(|&v| v == 0.0),
                    "code {j} unselected but nonzero"
                );
            }
        }
    }

    #[test]
    fn frozen_build_matches_live_build_at_snapshot() {
        let model = VqkdModel::init(tiny_config(), 6).unwrap();
        let batch = tiny_batch(&model, 1);
        let frozen = freeze_quantization(&model, &batch).unwrap();

        let run = |frozen: Option<&FrozenQuant>| {
            let mut g = Graph::new();
            let (bound, vars) = model.bind(&mut g);
            let handles = vqkd_objective(&mut g, &model, &bound, &batch, frozen).unwrap();
            g.backward(handles.loss).unwrap();
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).to_vec()).collect();
            (g.scalar(handles.loss), grads)
        };
        let (loss_live, grads_live) = run(None);
        let (loss_frozen, grads_frozen) = run(Some(&frozen));
        // The frozen surrogate rebuilds the decoder input as hn + (vqn−hn),
        // which lands within an ulp of vqn; exact equality is not expected.
        assert!((loss_live - loss_frozen).abs() <= 1e-12 * loss_live.abs());
        for (a, b) in grads_live.iter().zip(&grads_frozen) {
            for (x, y) in a.iter().zip(b) {
                let scale = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() <= 1e-12 * scale, "gradients diverge: {x} vs {y}");
            }
        }
    }

    #[test]
    fn objective_passes_finite_difference_check() {
        // Tiny instance: N=4, K=3, D=D_t=5, seed 0, frozen assignments.
        // Weights are pushed off the 0.02-scale init so the q/k score
        // gradients sit above the finite-difference noise floor.
        let mut model = VqkdModel::init(tiny_config(), 0).unwrap();
        {
            use rand_distr::{Distribution, Normal};
            let mut r = rng::stream(31, "fd-jitter");
            let dist = Normal::new(0.0, 0.3).unwrap();
            for t in model.tensors_mut() {
                for v in t.data_mut() {
                    *v += dist.sample(&mut r);
                }
            }
        }
        let batch = tiny_batch(&model, 1);
        let frozen = freeze_quantization(&model, &batch).unwrap();
        let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        let report = grad_check(
            &params,
            |g, vars| {
                let bound = model.bind_from(&mut vars.iter().copied());
                let handles = vqkd_objective(g, &model, &bound, &batch, Some(&frozen))?;
                Ok(handles.loss)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
