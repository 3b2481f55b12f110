use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::variant::{VariantSpec, N_LAYERS};
use crate::attention::{LayerNorm, Mlp, MltrBlock, TokenGeometry};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamInit, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// `images: [B, 3, H, W]` → patch vectors `[B, (H/P)·(W/P), 3·P·P]`, each
/// ordered channel, row, column like a convolution kernel.
pub fn patch_map(batch: usize, height: usize, width: usize, patch: usize) -> Result<Vec<usize>> {
    if height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} does not divide image {height}x{width}"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut map = Vec::with_capacity(batch * 3 * height * width);
    for b in 0..batch {
        for gr in 0..gh {
            for gc in 0..gw {
                for ch in 0..3 {
                    for pr in 0..patch {
                        for pc in 0..patch {
                            let (r, c) = (gr * patch + pr, gc * patch + pc);
                            map.push(((b * 3 + ch) * height + r) * width + c);
                        }
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Linear embedding of every `P×P×3` patch: `[B, 3, H, W]` → `[B, hw, C]`.
pub fn patch_project(
    tape: &mut Tape,
    images: Var,
    weight: Var,
    bias: Var,
    patch: usize,
) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Config(format!(
            "expected images [B, 3, H, W], got {shape:?}"
        )));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let map = patch_map(b, h, w, patch)?;
    let tokens = (h / patch) * (w / patch);
    let patches = tape.gather(images, &[b, tokens, 3 * patch * patch], Arc::from(map))?;
    Ok(tape.linear(patches, weight, Some(bias))?)
}

/// `[B, h·w, C]` → `[B, (h/2)·(w/2), 4C]`; the 2×2 neighbours of each output
/// token are stacked in row-major order, each contributing `C` channels.
pub fn space_to_depth_map(batch: usize, h: usize, w: usize, c: usize) -> Result<Vec<usize>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "space-to-depth needs even extents, got {h}x{w}"
        )));
    }
    let mut map = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for r in 0..h / 2 {
            for col in 0..w / 2 {
                for dr in 0..2 {
                    for dc in 0..2 {
                        let src = (b * h + 2 * r + dr) * w + 2 * col + dc;
                        map.extend((0..c).map(|ch| src * c + ch));
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Rearranges 2×2 blocks into channels and projects `4C → 2C` with `weight`.
pub fn space_to_depth(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let c = *tape.shape(x).last().expect("rank 3");
    let map = space_to_depth_map(batch, h, w, c)?;
    let stacked = tape.gather(x, &[batch, (h / 2) * (w / 2), 4 * c], Arc::from(map))?;
    Ok(tape.linear(stacked, weight, None)?)
}

/// Tape handles produced by [`MlTr::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Output {
    /// Clamped cosine between pooled features and class weights, `[B, n]`.
    pub cos: Var,
    /// `s · cos`, `[B, n]`.
    pub label_logits: Var,
    /// `[B, n + 1]`
    pub count_logits: Var,
    /// Last-layer pixel tokens `[B, h·w, 8C]` before pooling.
    pub features: Var,
}

/// Detached results of [`MlTr::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub cos: Tensor,
    pub count_logits: Tensor,
    /// `[B, 8C, h, w]`
    pub feature_maps: Tensor,
}

#[derive(Clone, Debug)]
pub struct MlTr {
    pub spec: VariantSpec,
    pub n_classes: usize,
    pub store: ParamStore,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub layers: Vec<Vec<MltrBlock>>,
    pub merges: Vec<ParamId>,
    pub token: ParamId,
    pub norm: LayerNorm,
    pub label_head: Mlp,
    pub class_w: ParamId,
    pub count_head: Mlp,
}

impl MlTr {
    pub fn new(spec: VariantSpec, n_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if n_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit::new(&mut store, &mut rng);
        let (p, c) = (spec.patch, spec.channels);
        let d = spec.head_dim();

        let mut pi = init.scope("patch");
        let patch_w = pi.weight("w", 3 * p * p, c);
        let patch_b = pi.constant("b", &[c], 0.0);

        let mut layers = Vec::with_capacity(N_LAYERS);
        let mut merges = Vec::with_capacity(N_LAYERS - 1);
        for (i, &n_blocks) in spec.blocks.iter().enumerate() {
            let ci = spec.layer_channels(i);
            let g = spec.grid(i);
            if i > 0 {
                let prev = spec.layer_channels(i - 1);
                merges.push(init.weight(&format!("merge{i}.w"), 4 * prev, ci));
            }
            let mut blocks = Vec::with_capacity(n_blocks);
            for j in 0..n_blocks {
                let mut bi = init.scope(&format!("layer{}.block{j}", i + 1));
                blocks.push(MltrBlock::new(&mut bi, ci, spec.window, g, g)?);
            }
            layers.push(blocks);
        }
        let token = init.normal("token", &[d], 0.02, false);
        let norm = LayerNorm::new(&mut init.scope("norm"), d);
        let mut hi = init.scope("head");
        let label_head = Mlp::new(&mut hi.scope("label"), d, d, d);
        let class_w = hi.weight("class_w", d, n_classes);
        let count_head = Mlp::new(&mut hi.scope("count"), d, d, n_classes + 1);

        Ok(Self {
            spec,
            n_classes,
            store,
            patch_w,
            patch_b,
            layers,
            merges,
            token,
            norm,
            label_head,
            class_w,
            count_head,
        })
    }

    /// Trainable scalars of the constructed model.
    pub fn param_count(&self) -> usize {
        self.store.count_scalars()
    }

    /// Closed-form parameter count; equals [`param_count`](Self::param_count).
    pub fn analytic_param_count(spec: &VariantSpec, n_classes: usize) -> usize {
        let (p, c, ws) = (spec.patch, spec.channels, spec.window);
        let d = spec.head_dim();
        let mut total = 3 * p * p * c + c;
        for (i, &n) in spec.blocks.iter().enumerate() {
            let ci = spec.layer_channels(i);
            if i > 0 {
                total += 4 * spec.layer_channels(i - 1) * ci;
            }
            total += n * MltrBlock::param_count(ci, ws);
        }
        let mlp = |a: usize, h: usize, b: usize| a * h + h + h * b + b;
        total + d + 2 * d + mlp(d, d, d) + d * n_classes + mlp(d, d, n_classes + 1)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var, scale: Real) -> Result<Output> {
        let shape = tape.shape(images).to_vec();
        let r = self.spec.resolution;
        if shape.len() != 4 || shape[1..] != [3, r, r] {
            return Err(Error::Config(format!(
                "variant {} expects images [B, 3, {r}, {r}], got {shape:?}",
                self.spec.name
            )));
        }
        let batch = shape[0];
        let mut x = patch_project(
            tape,
            images,
            p.var(self.patch_w),
            p.var(self.patch_b),
            self.spec.patch,
        )?;
        for (i, blocks) in self.layers.iter().enumerate() {
            let g = self.spec.grid(i);
            if i > 0 {
                x = space_to_depth(tape, x, p.var(self.merges[i - 1]), batch, 2 * g, 2 * g)?;
            }
            let last = i == N_LAYERS - 1;
            let mut geom = TokenGeometry::pixels(batch, g, g);
            if last {
                let d = self.spec.head_dim();
                let map: Vec<usize> = (0..batch * d).map(|k| k % d).collect();
                let tok = tape.gather(p.var(self.token), &[batch, 1, d], Arc::from(map))?;
                x = tape.concat(&[x, tok], 1)?;
                geom.extra = 1;
            }
            for block in blocks {
                x = block.forward(tape, p, x, geom)?;
            }
        }
        let g = self.spec.grid(N_LAYERS - 1);
        let d = self.spec.head_dim();
        let x = self.norm.forward(tape, p, x)?;
        let features = tape.slice(x, 1, 0, g * g)?;
        let tok = tape.slice(x, 1, g * g, 1)?;
        let tok = tape.reshape(tok, &[batch, d])?;

        let pooled = tape.mean_axis(features, 1, false)?;
        let emb = self.label_head.forward(tape, p, pooled)?;
        let cos = cosine(tape, emb, p.var(self.class_w))?;
        let label_logits = tape.scale(cos, scale)?;
        let count_logits = self.count_head.forward(tape, p, tok)?;
        Ok(Output {
            cos,
            label_logits,
            count_logits,
            features,
        })
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, images: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false)?;
        let x = tape.constant(images.shape(), images.data().to_vec())?;
        let out = self.forward(&mut tape, &p, x, 1.0)?;
        let batch = images.shape()[0];
        let g = self.spec.grid(N_LAYERS - 1);
        let d = self.spec.head_dim();
        let maps = tape
            .to_tensor(out.features)
            .permute(&[0, 2, 1])?
            .reshape(&[batch, d, g, g])?;
        Ok(Inference {
            cos: tape.to_tensor(out.cos),
            count_logits: tape.to_tensor(out.count_logits),
            feature_maps: maps,
        })
    }
}

/// Cosine similarity of rows of `x: [B, D]` with columns of `w: [D, n]`,
/// clamped to `[-1, 1]`. Zero-norm rows or columns are a domain error.
pub fn cosine(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let x2 = tape.mul(x, x)?;
    let xn = tape.sum_axis(x2, 1, true)?;
    let xn = tape.sqrt(xn)?;
    let xu = tape.div(x, xn)?;
    let w2 = tape.mul(w, w)?;
    let wn = tape.sum_axis(w2, 0, true)?;
    let wn = tape.sqrt(wn)?;
    let wu = tape.div(w, wn)?;
    let cos = tape.matmul(xu, wu)?;
    Ok(tape.clamp(cos, -1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};

    fn image(batch: usize, res: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * 3 * res * res)
            .map(|_| rng.random::<Real>())
            .collect();
        Tensor::new(&[batch, 3, res, res], data).unwrap()
    }

    #[test]
    fn constructed_count_matches_closed_form() {
        for spec in [VariantSpec::tiny(), VariantSpec::tiny32()] {
            let m = MlTr::new(spec.clone(), 5, 0).unwrap();
            assert_eq!(m.param_count(), MlTr::analytic_param_count(&spec, 5));
        }
    }

    #[test]
    fn constant_image_gives_identical_patch_tokens() {
        let mut tape = Tape::new();
        let img = tape.leaf(&Tensor::full(&[1, 3, 8, 8], 0.3)).unwrap();
        let w = tape
            .leaf(&image(1, 4, 1).reshape(&[12, 4]).unwrap())
            .unwrap();
        let b = tape.leaf(&Tensor::zeros(&[4])).unwrap();
        let y = patch_project(&mut tape, img, w, b, 2).unwrap();
        let y = tape.to_tensor(y);
        assert_eq!(y.shape(), &[1, 16, 4]);
        for t in 1..16 {
            assert_eq!(y.data()[t * 4..t * 4 + 4], y.data()[..4]);
        }
    }

    #[test]
    fn space_to_depth_with_selector_weight_rearranges() {
        let (h, w, c) = (4, 4, 3);
        let x: Vec<Real> = (0..h * w * c).map(|i| i as Real).collect();
        let mut sel = vec![0.0; 4 * c * 2 * c];
        for k in 0..2 * c {
            sel[k * 2 * c + k] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape
            .leaf(&Tensor::new(&[1, h * w, c], x.clone()).unwrap())
            .unwrap();
        let wv = tape
            .leaf(&Tensor::new(&[4 * c, 2 * c], sel).unwrap())
            .unwrap();
        let yv = space_to_depth(&mut tape, xv, wv, 1, h, w).unwrap();
        let y = tape.to_tensor(yv);
        assert_eq!(y.shape(), &[1, 4, 2 * c]);
        // output token (r, col) takes pixels (2r, 2col) then (2r, 2col + 1)
        for r in 0..2 {
            for col in 0..2 {
                let tok = &y.data()[(r * 2 + col) * 2 * c..][..2 * c];
                let p0 = (2 * r * w + 2 * col) * c;
                let p1 = p0 + c;
                assert_eq!(&tok[..c], &x[p0..p0 + c]);
                assert_eq!(&tok[c..], &x[p1..p1 + c]);
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(&Tensor::zeros(&[1, 9, 1])).unwrap();
        let wv = tape.leaf(&Tensor::zeros(&[4, 2])).unwrap();
        assert!(space_to_depth(&mut tape, xv, wv, 1, 3, 3).is_err());
    }

    #[test]
    fn forward_shapes_bounds_and_determinism() {
        let m = MlTr::new(VariantSpec::tiny(), 6, 3).unwrap();
        let img = image(2, 16, 4);
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape, false).unwrap();
        let x = tape.leaf(&img).unwrap();
        let out = m.forward(&mut tape, &p, x, 8.0).unwrap();
        assert_eq!(tape.shape(out.label_logits), &[2, 6]);
        assert_eq!(tape.shape(out.count_logits), &[2, 7]);
        assert_eq!(tape.shape(out.features), &[2, 4, 64]);
        assert!(tape.value(out.label_logits).iter().all(|v| v.abs() <= 8.0));
        let a = m.infer(&img).unwrap();
        let b = m.infer(&img).unwrap();
        assert_eq!(a.cos.data(), b.cos.data());
        assert_eq!(a.feature_maps.shape(), &[2, 64, 2, 2]);

        let wrong = image(1, 32, 0);
        assert!(matches!(m.infer(&wrong), Err(Error::Config(_))));
    }

    #[test]
    fn zero_feature_is_a_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 3])).unwrap();
        let w = tape.leaf(&Tensor::full(&[3, 2], 1.0)).unwrap();
        assert!(cosine(&mut tape, x, w).is_err());
    }

    #[test]
    fn head_gradients_match_central_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = ParamInit::new(&mut store, &mut rng).normal("w", &[4, 3], 1.0, true);
        let x = image(1, 2, 5).reshape(&[3, 4]).unwrap();
        let report = check_gradients(&mut store, &GradCheckOptions::default(), |tape, p| {
            let xv = tape.leaf(&x)?;
            let c = cosine(tape, xv, p.var(w))?;
            let c2 = tape.mul(c, c)?;
            Ok(tape.sum(c2)?)
        })
        .unwrap();
        assert!(report.passed, "{report}");
    }
}
