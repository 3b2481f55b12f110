//! Procedural multi-label images built from coloured glyphs.
//!
//! Each class is one glyph (shape, colour, size tier). Class presence is
//! drawn from per-class base rates, except that a class with a parent in the
//! co-occurrence matrix is drawn with probability `P(child | parent)` when the
//! parent is present. Two classes of a similar pair render identically apart
//! from a small notch cut out of the glyph centre.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::{Real, Tensor};

const PLACEMENT_RETRIES: usize = 64;
const SAMPLE_ATTEMPTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Shape {
    const ALL: [Shape; 6] = [
        Shape::Square,
        Shape::Disk,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Diamond,
    ];

    /// Whether the unit-square point `(u, v)` (v grows downwards) is inked
    /// on a glyph `side` pixels wide.
    fn covers(self, u: Real, v: Real, side: usize) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Square => true,
            Shape::Disk => r2 <= 0.25,
            Shape::Triangle => v >= 2.0 * du.abs(),
            Shape::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            Shape::Ring => r2 <= 0.25 && (side < 4 || r2 >= 0.09),
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeTier {
    Small,
    Medium,
    Large,
}

impl SizeTier {
    /// Inclusive range of glyph side lengths on a `canvas`-pixel square.
    /// Small glyphs always cover less than 1% of the canvas.
    pub fn side_range(self, canvas: usize) -> (usize, usize) {
        match self {
            SizeTier::Small => {
                let hi = (1..canvas)
                    .take_while(|s| 100 * s * s < canvas * canvas)
                    .last()
                    .unwrap_or(0);
                (hi.min(2), hi)
            }
            SizeTier::Medium => ((canvas / 8).max(3), (canvas / 5).max(4)),
            SizeTier::Large => ((canvas / 4).max(5), (canvas / 3).max(6)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: Shape,
    pub color: [Real; 3],
    pub tier: SizeTier,
    /// Centre cut-out distinguishing the second member of a similar pair.
    pub notch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub glyphs: Vec<Glyph>,
    pub base_rates: Vec<Real>,
    /// `cooccurrence[a][b] = P(b present | a present)`; zero means no link.
    /// Each class has at most one parent and links form no cycle.
    pub cooccurrence: Vec<Vec<Real>>,
    pub similar_pairs: Vec<(usize, usize)>,
    /// Amplitude of uniform background noise.
    pub noise: Real,
    pub seed: u64,
}

const PALETTE: [[Real; 3]; 8] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.9, 0.1],
    [0.1, 0.85, 0.9],
    [0.9, 0.2, 0.85],
    [0.95, 0.55, 0.1],
    [0.95, 0.95, 0.95],
];

impl SynthSpec {
    /// Distinct glyphs for every class, base rate 0.3, no links or pairs.
    /// Every fourth class is small and every fourth (offset by two) large.
    pub fn new(n_classes: usize, canvas: usize, seed: u64) -> Self {
        let glyphs = (0..n_classes)
            .map(|c| Glyph {
                shape: Shape::ALL[c % Shape::ALL.len()],
                color: PALETTE[(c + c / Shape::ALL.len()) % PALETTE.len()],
                tier: match c % 4 {
                    0 if c > 0 => SizeTier::Small,
                    2 => SizeTier::Large,
                    _ => SizeTier::Medium,
                },
                notch: false,
            })
            .collect();
        Self {
            n_classes,
            canvas,
            glyphs,
            base_rates: vec![0.3; n_classes],
            cooccurrence: vec![vec![0.0; n_classes]; n_classes],
            similar_pairs: Vec::new(),
            noise: 0.1,
            seed,
        }
    }

    /// Eight classes on a 32-pixel canvas: classes 0 and 1 form a similar
    /// pair and class 3 always accompanies class 2.
    pub fn demo(seed: u64) -> Self {
        Self::new(8, 32, seed).with_demo_structure()
    }

    /// Adds the similar pair (0, 1) and the forced link 2 → 3.
    pub fn with_demo_structure(mut self) -> Self {
        if self.n_classes >= 4 {
            self.make_similar(0, 1);
            self.cooccurrence[2][3] = 1.0;
        }
        self
    }

    /// Turns `b` into a notched copy of `a`.
    pub fn make_similar(&mut self, a: usize, b: usize) {
        let mut g = self.glyphs[a].clone();
        g.notch = !g.notch;
        if g.tier == SizeTier::Small {
            g.tier = SizeTier::Medium;
            self.glyphs[a].tier = SizeTier::Medium;
        }
        self.glyphs[b] = g;
        self.similar_pairs.push((a, b));
    }

    fn parents(&self) -> Vec<Option<usize>> {
        (0..self.n_classes)
            .map(|b| (0..self.n_classes).find(|&a| a != b && self.cooccurrence[a][b] > 0.0))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes;
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if n == 0 {
            return bad("no classes".into());
        }
        if self.glyphs.len() != n || self.base_rates.len() != n {
            return bad(format!("expected {n} glyphs and base rates"));
        }
        if self.cooccurrence.len() != n || self.cooccurrence.iter().any(|r| r.len() != n) {
            return bad(format!("co-occurrence matrix must be {n}x{n}"));
        }
        let in_unit = |v: &Real| (0.0..=1.0).contains(v);
        if !self.base_rates.iter().all(in_unit) || !self.cooccurrence.iter().flatten().all(in_unit)
        {
            return bad("rates must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]".into());
        }
        for b in 0..n {
            let k = (0..n)
                .filter(|&a| a != b && self.cooccurrence[a][b] > 0.0)
                .count();
            if k > 1 {
                return bad(format!(
                    "class {b} is conditioned on {k} classes, at most one allowed"
                ));
            }
        }
        let parents = self.parents();
        for start in 0..n {
            let (mut c, mut steps) = (start, 0);
            while let Some(p) = parents[c] {
                c = p;
                steps += 1;
                if steps > n {
                    return bad(format!(
                        "co-occurrence links through class {start} form a cycle"
                    ));
                }
            }
        }
        for g in &self.glyphs {
            let (lo, hi) = g.tier.side_range(self.canvas);
            if lo == 0 || lo > hi || hi >= self.canvas {
                return bad(format!(
                    "canvas {} cannot host {:?} glyphs",
                    self.canvas, g.tier
                ));
            }
        }
        for &(a, b) in &self.similar_pairs {
            if a >= n || b >= n || a == b {
                return bad(format!("invalid similar pair ({a}, {b})"));
            }
            let (ga, gb) = (&self.glyphs[a], &self.glyphs[b]);
            if ga.shape != gb.shape
                || ga.color != gb.color
                || ga.tier != gb.tier
                || ga.notch == gb.notch
            {
                return bad(format!("classes {a} and {b} must differ only by the notch"));
            }
        }
        Ok(())
    }

    fn sample_classes(
        &self,
        rng: &mut ChaCha8Rng,
        parents: &[Option<usize>],
        order: &[usize],
    ) -> LabelVector {
        let mut y = LabelVector::new(self.n_classes);
        for &c in order {
            let p = match parents[c] {
                Some(a) if y.get(a) => self.cooccurrence[a][c],
                _ => self.base_rates[c],
            };
            if rng.random::<Real>() < p {
                y.set(c);
            }
        }
        y
    }

    /// Classes with parents ordered after their parents.
    fn order(&self, parents: &[Option<usize>]) -> Vec<usize> {
        let depth = |mut c: usize| {
            let mut d = 0;
            while let Some(p) = parents[c] {
                c = p;
                d += 1;
            }
            d
        };
        let mut order: Vec<usize> = (0..self.n_classes).collect();
        order.sort_by_key(|&c| depth(c));
        order
    }
}

#[derive(Clone, Copy)]
struct Placed {
    row: usize,
    col: usize,
    side: usize,
}

impl Placed {
    fn overlaps(&self, o: &Placed) -> bool {
        // one pixel of clearance between glyphs
        self.row < o.row + o.side + 1
            && o.row < self.row + self.side + 1
            && self.col < o.col + o.side + 1
            && o.col < self.col + self.side + 1
    }
}

fn render(spec: &SynthSpec, y: &LabelVector, rng: &mut ChaCha8Rng) -> Option<Tensor> {
    let s = spec.canvas;
    let mut placed: Vec<(usize, Placed)> = Vec::new();
    // large glyphs first so that small ones fill the gaps
    let mut classes = y.classes();
    classes.sort_by_key(|&c| std::cmp::Reverse(spec.glyphs[c].tier as u8));
    for c in classes {
        let (lo, hi) = spec.glyphs[c].tier.side_range(s);
        let side = rng.random_range(lo..=hi);
        let spot = (0..PLACEMENT_RETRIES).find_map(|_| {
            let p = Placed {
                row: rng.random_range(0..=s - side),
                col: rng.random_range(0..=s - side),
                side,
            };
            placed.iter().all(|(_, q)| !p.overlaps(q)).then_some(p)
        })?;
        placed.push((c, spot));
    }
    let mut data: Vec<Real> = (0..3 * s * s)
        .map(|_| spec.noise * rng.random::<Real>())
        .collect();
    for (c, p) in placed {
        let g = &spec.glyphs[c];
        for r in 0..p.side {
            for col in 0..p.side {
                let u = (col as Real + 0.5) / p.side as Real;
                let v = (r as Real + 0.5) / p.side as Real;
                let notched = g.notch && (u - 0.5).abs() < 0.2 && (v - 0.5).abs() < 0.2;
                if !g.shape.covers(u, v, p.side) || notched {
                    continue;
                }
                for ch in 0..3 {
                    let k = (ch * s + p.row + r) * s + p.col + col;
                    data[k] = g.color[ch];
                }
            }
        }
    }
    Some(Tensor::new(&[3, s, s], data).expect("canvas shape"))
}

/// Generates `count` samples. Sample `i` depends only on `(spec, i)`.
pub fn generate(spec: &SynthSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let parents = spec.parents();
    let order = spec.order(&parents);
    let mut ds = Dataset::new(spec.canvas, spec.n_classes);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let mut done = false;
        for attempt in 0..SAMPLE_ATTEMPTS {
            let y = spec.sample_classes(&mut rng, &parents, &order);
            match render(spec, &y, &mut rng) {
                Some(img) => {
                    ds.push(img, y)?;
                    done = true;
                    break;
                }
                None => warn!(
                    "sample {i}: no room for {} glyphs (attempt {}), resampling classes",
                    y.z(),
                    attempt + 1
                ),
            }
        }
        if !done {
            return Err(Error::Data(format!(
                "sample {i}: glyph placement failed {SAMPLE_ATTEMPTS} times"
            )));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SynthSpec::demo(3);
        let a = generate(&spec, 12).unwrap();
        let b = generate(&spec, 12).unwrap();
        assert_eq!(a, b);
        let prefix = generate(&spec, 5).unwrap();
        assert_eq!(prefix.images[..], a.images[..5]);
        let other = generate(&SynthSpec::demo(4), 12).unwrap();
        assert_ne!(other.labels, a.labels);
    }

    #[test]
    fn forced_link_always_holds_and_values_in_range() {
        let spec = SynthSpec::demo(1);
        let ds = generate(&spec, 200).unwrap();
        let mut seen = 0;
        for (img, y) in ds.images.iter().zip(&ds.labels) {
            if y.get(2) {
                assert!(y.get(3));
                seen += 1;
            }
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(seen > 20);
    }

    #[test]
    fn conditional_frequency_matches_spec() {
        let mut spec = SynthSpec::new(4, 16, 9);
        spec.base_rates = vec![0.5, 0.2, 0.3, 0.3];
        spec.cooccurrence[0][1] = 0.7;
        let ds = generate(&spec, 10_000).unwrap();
        let with_a: Vec<&LabelVector> = ds.labels.iter().filter(|y| y.get(0)).collect();
        let p = with_a.iter().filter(|y| y.get(1)).count() as f64 / with_a.len() as f64;
        assert!((p - 0.7).abs() < 0.03, "P(b|a) = {p}");
    }

    #[test]
    fn labels_match_rendered_glyphs() {
        // each glyph colour appears in the image iff its class is present
        let mut spec = SynthSpec::new(6, 32, 5);
        spec.noise = 0.0;
        let ds = generate(&spec, 50).unwrap();
        for (img, y) in ds.images.iter().zip(&ds.labels) {
            let s = spec.canvas;
            for c in 0..spec.n_classes {
                let col = spec.glyphs[c].color;
                let found =
                    (0..s * s).any(|k| (0..3).all(|ch| img.data()[ch * s * s + k] == col[ch]));
                assert_eq!(found, y.get(c), "class {c}");
            }
        }
    }

    #[test]
    fn small_tier_under_one_percent() {
        for canvas in [16, 32, 64, 224] {
            let (lo, hi) = SizeTier::Small.side_range(canvas);
            assert!(lo >= 1 && lo <= hi);
            assert!(((hi * hi) as f64) < 0.01 * (canvas * canvas) as f64);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SynthSpec::new(3, 32, 0);
        spec.cooccurrence[0][2] = 0.5;
        spec.cooccurrence[1][2] = 0.5;
        assert!(generate(&spec, 1).is_err());
        let mut spec = SynthSpec::new(3, 32, 0);
        spec.cooccurrence[0][1] = 0.5;
        spec.cooccurrence[1][0] = 0.5;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::new(3, 32, 0);
        spec.similar_pairs.push((0, 1));
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::new(3, 32, 0);
        spec.base_rates[0] = 1.5;
        assert!(spec.validate().is_err());
    }
}
