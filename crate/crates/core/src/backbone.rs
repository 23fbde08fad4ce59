//! Frozen vision transformer: shared patch embedding, prompt insertion,
//! pre-norm transformer blocks, CLS readout, and the trainable projection.
//!
//! Position rows are split in two frozen tables: `backbone.pos` for CLS and
//! patches, `backbone.prompt_pos` for the prompt slots. Inserted sequences
//! use the order `[CLS; prompts; patches]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::BackboneConfig;
use crate::eeg::NORM_EPS;
use crate::error::{dim_err, Error, Result};
use crate::params::{register_linear, Ctx, Group, ParamStore, Role};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
pub const PROMPTS: &str = "prompt.tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitSpec {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub prompts: usize,
    pub image_size: usize,
    pub projection_depth: usize,
    pub embed_dim: usize,
}

impl VitSpec {
    pub fn from_config(cfg: &BackboneConfig, image_size: usize, embed_dim: usize) -> Result<Self> {
        if cfg.patch == 0 || image_size % cfg.patch != 0 {
            return Err(Error::Config(format!("image size {image_size} is not divisible by patch size {}", cfg.patch)));
        }
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", cfg.heads, cfg.width)));
        }
        Ok(Self {
            width: cfg.width,
            depth: cfg.depth,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            patch: cfg.patch,
            prompts: cfg.prompts,
            image_size,
            projection_depth: cfg.projection_depth.max(1),
            embed_dim,
        })
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn seq_len(&self) -> usize {
        1 + self.prompts + self.patches()
    }
}

/// Frozen tensors draw from `frozen_rng`, trainable ones from `rng`, so the
/// backbone is identical across runs that differ only in trainable layout.
pub fn register<R: Rng + ?Sized>(
    store: &mut ParamStore,
    spec: &VitSpec,
    frozen_rng: &mut ChaCha8Rng,
    prompt_pos_rng: &mut ChaCha8Rng,
    rng: &mut R,
) -> Result<()> {
    let d = spec.width;
    let fr = Role::Frozen;
    let std = 1.0 / (d as f64).sqrt();
    register_linear(store, "backbone.patch", 3 * spec.patch * spec.patch, d, fr, frozen_rng)?;
    store.insert("backbone.cls", Tensor::randn([d], std, frozen_rng), fr)?;
    store.insert("backbone.pos", Tensor::randn([1 + spec.patches(), d], std, frozen_rng), fr)?;
    for i in 0..spec.depth {
        let p = format!("backbone.block{i}");
        store.insert(format!("{p}.ln1.gain"), Tensor::ones([d]), fr)?;
        store.insert(format!("{p}.ln1.bias"), Tensor::zeros([d]), fr)?;
        register_linear(store, &format!("{p}.attn.qkv"), d, 3 * d, fr, frozen_rng)?;
        register_linear(store, &format!("{p}.attn.out"), d, d, fr, frozen_rng)?;
        store.insert(format!("{p}.ln2.gain"), Tensor::ones([d]), fr)?;
        store.insert(format!("{p}.ln2.bias"), Tensor::zeros([d]), fr)?;
        register_linear(store, &format!("{p}.mlp.fc1"), d, spec.mlp_ratio * d, fr, frozen_rng)?;
        register_linear(store, &format!("{p}.mlp.fc2"), spec.mlp_ratio * d, d, fr, frozen_rng)?;
    }
    if spec.prompts > 0 {
        store.insert("backbone.prompt_pos", Tensor::randn([spec.prompts, d], std, prompt_pos_rng), fr)?;
        store.insert(PROMPTS, Tensor::randn([spec.prompts, d], std, rng), Role::Trainable(Group::B))?;
    }
    let a = Role::Trainable(Group::A);
    for i in 0..spec.projection_depth {
        let out = if i + 1 == spec.projection_depth { spec.embed_dim } else { d };
        register_linear(store, &format!("projection.{i}"), d, out, a, rng)?;
    }
    Ok(())
}

/// `[B, 3, H, W] -> [B, N, d_v]` over non-overlapping patches.
pub fn patch_embed(ctx: &Ctx, spec: &VitSpec, images: Var) -> Result<Var> {
    let s = ctx.g.shape(images);
    if s.len() != 4 || s[1] != 3 {
        return dim_err(format!("patch embedding expects [B, 3, H, W], got {s:?}"));
    }
    if s[2] % spec.patch != 0 || s[3] % spec.patch != 0 {
        return Err(Error::Config(format!("image {}x{} is not divisible by patch size {}", s[2], s[3], spec.patch)));
    }
    let cols = ctx.g.im2col(images, (spec.patch, spec.patch), spec.patch, (0, 0))?;
    ctx.linear(cols, "backbone.patch")
}

/// `[CLS; P; X]` plus positional rows. `prompts` is `[N_p, d_v]` or absent.
pub fn insert_prompts(g: &Graph, cls: Var, prompts: Option<Var>, x: Var, pos: Var) -> Result<Var> {
    let sx = g.shape(x);
    if sx.len() != 3 {
        return dim_err(format!("patch tokens must be [B, N, d], got {sx:?}"));
    }
    let (b, d) = (sx[0], sx[2]);
    if g.shape(cls) != [d] {
        return dim_err(format!("CLS token {:?} does not match width {d}", g.shape(cls)));
    }
    let cls = g.add(g.constant(Tensor::zeros([b, 1, d])), cls)?;
    let mut parts = vec![cls];
    if let Some(p) = prompts {
        let sp = g.shape(p);
        if sp.len() != 2 || sp[1] != d {
            return dim_err(format!("prompt tokens {sp:?} do not match width {d}"));
        }
        parts.push(g.add(g.constant(Tensor::zeros([b, sp[0], d])), p)?);
    }
    parts.push(x);
    let seq = g.concat(&parts, 1)?;
    let len = g.shape(seq)[1];
    if g.shape(pos) != [len, d] {
        return dim_err(format!("positional table {:?} does not cover sequence of {len} tokens", g.shape(pos)));
    }
    g.add(seq, pos)
}

/// Positional rows for `[CLS; prompts; patches]`.
pub fn positions(ctx: &Ctx, spec: &VitSpec) -> Result<Var> {
    let base = ctx.p("backbone.pos")?;
    if spec.prompts == 0 {
        return Ok(base);
    }
    let g = ctx.g;
    let cls = g.narrow(base, 0, 0, 1)?;
    let patches = g.narrow(base, 0, 1, spec.patches())?;
    g.concat(&[cls, ctx.p("backbone.prompt_pos")?, patches], 0)
}

fn layer_norm(ctx: &Ctx, x: Var, prefix: &str) -> Result<Var> {
    let g = ctx.g;
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul(n, ctx.p(&format!("{prefix}.gain"))?)?;
    g.add(n, ctx.p(&format!("{prefix}.bias"))?)
}

/// Splits `[B, S, h*dh]` into `[B, h, S, dh]`.
pub(crate) fn split_heads(g: &Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x);
    let x = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

pub(crate) fn merge_heads(g: &Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[s[0], s[2], s[1] * s[3]])
}

/// Scaled dot-product attention over `[B, h, S, dh]` tensors; returns output and weights.
pub(crate) fn attention(g: &Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().expect("rank 4");
    let scores = g.matmul(q, g.transpose(k)?)?;
    let w = g.softmax_last(g.scale(scores, 1.0 / (dh as f64).sqrt()))?;
    Ok((g.matmul(w, v)?, w))
}

fn block(ctx: &Ctx, spec: &VitSpec, x: Var, i: usize) -> Result<Var> {
    let g = ctx.g;
    let p = format!("backbone.block{i}");
    let d = spec.width;
    let h = layer_norm(ctx, x, &format!("{p}.ln1"))?;
    let qkv = ctx.linear(h, &format!("{p}.attn.qkv"))?;
    let q = split_heads(g, g.narrow(qkv, 2, 0, d)?, spec.heads)?;
    let k = split_heads(g, g.narrow(qkv, 2, d, d)?, spec.heads)?;
    let v = split_heads(g, g.narrow(qkv, 2, 2 * d, d)?, spec.heads)?;
    let (a, _) = attention(g, q, k, v)?;
    let a = ctx.linear(merge_heads(g, a)?, &format!("{p}.attn.out"))?;
    let x = g.add(x, a)?;
    let h = layer_norm(ctx, x, &format!("{p}.ln2"))?;
    let h = g.gelu(ctx.linear(h, &format!("{p}.mlp.fc1"))?);
    let h = ctx.linear(h, &format!("{p}.mlp.fc2"))?;
    g.add(x, h)
}

/// CLS output `[B, d_v]` after all blocks. The sequence must already carry positions.
pub fn vit_forward(ctx: &Ctx, spec: &VitSpec, seq: Var) -> Result<Var> {
    let g = ctx.g;
    let s = g.shape(seq);
    if s.len() != 3 || s[1] != spec.seq_len() || s[2] != spec.width {
        return dim_err(format!(
            "transformer expects [B, {}, {}] tokens, got {s:?}",
            spec.seq_len(),
            spec.width
        ));
    }
    let mut x = seq;
    for i in 0..spec.depth {
        x = block(ctx, spec, x, i)?;
    }
    let cls = g.narrow(x, 1, 0, 1)?;
    g.reshape(cls, &[s[0], s[2]])
}

/// Projection head then row normalization.
pub fn project(ctx: &Ctx, spec: &VitSpec, z: Var) -> Result<Var> {
    let mut h = z;
    for i in 0..spec.projection_depth {
        if i > 0 {
            h = ctx.g.gelu(h);
        }
        h = ctx.linear(h, &format!("projection.{i}"))?;
    }
    ctx.g.l2_normalize(h, NORM_EPS)
}

/// The image path with no filtering or prompts: frozen ViT + projection.
pub fn plain_image_embedding(ctx: &Ctx, spec: &VitSpec, images: Var) -> Result<Var> {
    if spec.prompts != 0 {
        return Err(Error::Contract("plain embedding is defined for prompt-free backbones".into()));
    }
    let x = patch_embed(ctx, spec, images)?;
    let seq = insert_prompts(ctx.g, ctx.p("backbone.cls")?, None, x, ctx.p("backbone.pos")?)?;
    let z = vit_forward(ctx, spec, seq)?;
    project(ctx, spec, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(prompts: usize, depth: usize) -> (VitSpec, ParamStore) {
        let cfg = BackboneConfig { prompts, depth, ..Default::default() };
        let spec = VitSpec::from_config(&cfg, 32, 128).unwrap();
        let mut store = ParamStore::new();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let mut c = ChaCha8Rng::seed_from_u64(3);
        register(&mut store, &spec, &mut a, &mut b, &mut c).unwrap();
        (spec, store)
    }

    #[test]
    fn geometry_and_zero_image() {
        let (spec, store) = setup(4, 2);
        assert_eq!(spec.patches(), 16);
        assert_eq!(spec.seq_len(), 21);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let x = patch_embed(&ctx, &spec, g.constant(Tensor::zeros([2, 3, 32, 32]))).unwrap();
        let v = g.value(x);
        assert_eq!(v.shape(), &[2, 16, 64]);
        let bias = store.value("backbone.patch.bias").unwrap();
        for tok in v.data().chunks(64) {
            assert_eq!(tok, bias.data());
        }
    }

    #[test]
    fn indivisible_images_are_config_errors() {
        let (spec, store) = setup(0, 1);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let r = patch_embed(&ctx, &spec, g.constant(Tensor::zeros([1, 3, 30, 30])));
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(VitSpec::from_config(&BackboneConfig::default(), 30, 8).is_err());
    }

    #[test]
    fn prompt_slice_is_prompt_plus_position() {
        let (spec, store) = setup(4, 2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let x = g.constant(Tensor::zeros([2, 16, 64]));
        let pos = positions(&ctx, &spec).unwrap();
        let seq = insert_prompts(&g, ctx.p("backbone.cls").unwrap(), Some(ctx.p(PROMPTS).unwrap()), x, pos).unwrap();
        let v = g.value(seq);
        assert_eq!(v.shape(), &[2, 21, 64]);
        let p = store.value(PROMPTS).unwrap();
        let pp = store.value("backbone.prompt_pos").unwrap();
        for j in 0..4 {
            for c in 0..64 {
                assert_eq!(v.at(&[1, 1 + j, c]), p.at(&[j, c]) + pp.at(&[j, c]));
            }
        }
    }

    #[test]
    fn no_prompts_gives_one_plus_n_tokens() {
        let (spec, store) = setup(0, 2);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let x = g.constant(Tensor::zeros([1, 16, 64]));
        let seq = insert_prompts(&g, ctx.p("backbone.cls").unwrap(), None, x, positions(&ctx, &spec).unwrap()).unwrap();
        assert_eq!(g.shape(seq), vec![1, 17, 64]);
    }

    #[test]
    fn empty_stack_returns_cls_row() {
        let (spec, store) = setup(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let x = g.constant(Tensor::randn([2, 16, 64], 1.0, &mut rng));
        let pos = positions(&ctx, &spec).unwrap();
        let seq = insert_prompts(&g, ctx.p("backbone.cls").unwrap(), Some(ctx.p(PROMPTS).unwrap()), x, pos).unwrap();
        let z = vit_forward(&ctx, &spec, seq).unwrap();
        let cls = store.value("backbone.cls").unwrap();
        let p0 = store.value("backbone.pos").unwrap().row(0).to_vec();
        let want: Vec<f64> = cls.data().iter().zip(&p0).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(z).row(0), &want[..]);
        assert_eq!(g.value(z).row(1), &want[..]);
    }

    #[test]
    fn wrong_sequence_length_is_rejected() {
        let (spec, store) = setup(4, 1);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let seq = g.constant(Tensor::zeros([1, 17, 64]));
        assert!(matches!(vit_forward(&ctx, &spec, seq), Err(Error::Dimension(_))));
    }

    #[test]
    fn cls_output_ignores_patch_order() {
        let (spec, store) = setup(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let seq = Tensor::randn([1, 19, 64], 1.0, &mut rng);
        // Reverse the 16 patch rows (positions travel with their tokens).
        let mut perm = seq.clone();
        for j in 0..16 {
            for c in 0..64 {
                perm.set(&[0, 3 + j, c], seq.at(&[0, 3 + 15 - j, c]));
            }
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let a = vit_forward(&ctx, &spec, g.constant(seq)).unwrap();
        let b = vit_forward(&ctx, &spec, g.constant(perm)).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-12);
    }

    #[test]
    fn identity_projection_normalizes() {
        let cfg = BackboneConfig { width: 4, heads: 1, depth: 0, prompts: 0, patch: 2, ..Default::default() };
        let spec = VitSpec::from_config(&cfg, 4, 4).unwrap();
        let mut store = ParamStore::new();
        store.insert("projection.0.weight", Tensor::eye(4), Role::Trainable(Group::A)).unwrap();
        store.insert("projection.0.bias", Tensor::zeros([4]), Role::Trainable(Group::A)).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let z = g.constant(Tensor::new([1, 4], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        let y = project(&ctx, &spec, z).unwrap();
        assert!(g.value(y).max_abs_diff(&Tensor::new([1, 4], vec![0.6, 0.0, 0.8, 0.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn projection_shapes_over_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (width, embed, depth) in [(8, 128, 1), (16, 5, 2), (4, 3, 3)] {
            let cfg = BackboneConfig { width, heads: 1, depth: 0, prompts: 0, patch: 2, projection_depth: depth, ..Default::default() };
            let spec = VitSpec::from_config(&cfg, 4, embed).unwrap();
            let mut store = ParamStore::new();
            let (mut a, mut b) = (ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(1));
            register(&mut store, &spec, &mut a, &mut b, &mut rng).unwrap();
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, false);
            let z = g.constant(Tensor::randn([3, width], 1.0, &mut rng));
            assert_eq!(g.shape(project(&ctx, &spec, z).unwrap()), vec![3, embed]);
        }
    }

    #[test]
    fn backbone_is_frozen_and_heads_are_grouped() {
        let (_, store) = setup(4, 2);
        for p in store.iter() {
            let expect = if p.name.starts_with("backbone.") {
                Role::Frozen
            } else if p.name == PROMPTS {
                Role::Trainable(Group::B)
            } else {
                Role::Trainable(Group::A)
            };
            assert_eq!(p.role, expect, "{}", p.name);
        }
    }
}
