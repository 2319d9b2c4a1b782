//! Training-free patch tokenizers.
//!
//! A vocabulary is a set of unit vectors in flattened-patch space; a patch's
//! token is the index of the row with the largest dot product, i.e. the
//! highest cosine similarity, with ties going to the smallest index.

mod kmeans;

pub use kmeans::{kmeans_plus_plus_init, lloyd, squared_distance, KMeansOutcome};

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use rand::Rng;

use crate::data::{patchify, Image};
use crate::error::{bail, Result};
use crate::numerics::kernels::dot;
use crate::numerics::Tensor;
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VocabKind {
    RandomProjection,
    RandomPatches,
    Kmeans,
}

impl VocabKind {
    pub fn code(self) -> u8 {
        match self {
            VocabKind::RandomProjection => 0,
            VocabKind::RandomPatches => 1,
            VocabKind::Kmeans => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VocabKind::RandomProjection),
            1 => Some(VocabKind::RandomPatches),
            2 => Some(VocabKind::Kmeans),
            _ => None,
        }
    }
}

/// Transform applied to a patch before matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PatchNorm {
    /// Raw pixel values.
    #[default]
    None,
    /// Subtract the patch's own mean from every component.
    PatchMean,
}

impl PatchNorm {
    pub fn code(self) -> u8 {
        match self {
            PatchNorm::None => 0,
            PatchNorm::PatchMean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PatchNorm::None),
            1 => Some(PatchNorm::PatchMean),
            _ => None,
        }
    }

    pub fn apply(self, patch: &[f32]) -> Vec<f32> {
        match self {
            PatchNorm::None => patch.to_vec(),
            PatchNorm::PatchMean => {
                let mean = patch.iter().sum::<f32>() / patch.len() as f32;
                patch.iter().map(|v| v - mean).collect()
            }
        }
    }
}

/// Codebook of `V` unit rows of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    kind: VocabKind,
    seed: u64,
    norm: PatchNorm,
    vectors: Tensor<f32>,
}

impl Vocabulary {
    /// Validates unit-norm, pairwise-distinct rows.
    pub fn new(kind: VocabKind, seed: u64, norm: PatchNorm, vectors: Tensor<f32>) -> Result<Self> {
        if vectors.ndim() != 2 {
            bail!(Dimension, "vocabulary must be a matrix, got {:?}", vectors.shape());
        }
        let (v, _) = vectors.as_matrix();
        if v < 2 {
            bail!(Config, "vocabulary needs at least 2 rows, got {}", v);
        }
        let mut seen = BTreeSet::new();
        for r in 0..v {
            let row = vectors.row(r);
            let norm = libm::sqrt(row.iter().map(|&x| x as f64 * x as f64).sum::<f64>());
            if (norm - 1.0).abs() > 1e-5 {
                bail!(Usage, "vocabulary row {} has norm {}", r, norm);
            }
            if !seen.insert(row.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
                bail!(Usage, "vocabulary row {} duplicates an earlier row", r);
            }
        }
        Ok(Self {
            kind,
            seed,
            norm,
            vectors,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn norm(&self) -> PatchNorm {
        self.norm
    }

    pub fn size(&self) -> usize {
        self.vectors.as_matrix().0
    }

    pub fn dim(&self) -> usize {
        self.vectors.as_matrix().1
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }
}

fn unit(v: &mut [f32]) -> bool {
    let norm = libm::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>());
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

/// `V` vectors with i.i.d. uniform `[−1, 1]` components, L2-normalized.
pub fn build_random_projection(size: usize, dim: usize, seed: u64) -> Result<Vocabulary> {
    if size < 2 || dim == 0 {
        bail!(Config, "random projection needs V ≥ 2 and d ≥ 1, got V={} d={}", size, dim);
    }
    let mut rng = seeded(derive_seed(seed, &[0x9A0]));
    let mut rows: Vec<f32> = Vec::with_capacity(size * dim);
    let mut seen = BTreeSet::new();
    let mut rejected = 0usize;
    while rows.len() < size * dim {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        if unit(&mut v) && seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
            rows.extend_from_slice(&v);
            rejected = 0;
        } else {
            rejected += 1;
            if rejected > 10_000 {
                bail!(Config, "cannot draw {} distinct unit vectors in {} dimensions", size, dim);
            }
        }
    }
    Vocabulary::new(
        VocabKind::RandomProjection,
        seed,
        PatchNorm::None,
        Tensor::new(&[size, dim], rows)?,
    )
}

/// Every `(image, grid position)` pair of a set of images.
struct PatchPool<'a> {
    images: &'a [Image],
    per_image: usize,
    patch_size: usize,
}

impl<'a> PatchPool<'a> {
    fn new(images: &'a [Image], patch_size: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            bail!(Capacity, "no images to sample patches from");
        };
        let (h, w) = (first.height(), first.width());
        if images.iter().any(|im| im.height() != h || im.width() != w) {
            bail!(Dimension, "patch sampling needs images of one size");
        }
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            bail!(Dimension, "{}×{} images are not divisible into {}-pixel patches", h, w, patch_size);
        }
        Ok(Self {
            images,
            per_image: (h / patch_size) * (w / patch_size),
            patch_size,
        })
    }

    fn len(&self) -> usize {
        self.images.len() * self.per_image
    }

    fn patch(&self, index: usize) -> Vec<f32> {
        let p = self.patch_size;
        let image = &self.images[index / self.per_image];
        let pos = index % self.per_image;
        let cols = image.width() / p;
        let (r, c) = (pos / cols, pos % cols);
        let mut out = Vec::with_capacity(3 * p * p);
        for ch in 0..3 {
            let plane = image.plane(ch);
            for y in 0..p {
                let start = (r * p + y) * image.width() + c * p;
                out.extend_from_slice(&plane[start..start + p]);
            }
        }
        out
    }
}

/// Lazily shuffled index stream: uniform sampling without replacement.
struct WithoutReplacement {
    perm: Vec<usize>,
    next: usize,
}

impl WithoutReplacement {
    fn new(len: usize) -> Self {
        Self {
            perm: (0..len).collect(),
            next: 0,
        }
    }

    fn draw<R: Rng>(&mut self, rng: &mut R) -> Option<usize> {
        if self.next >= self.perm.len() {
            return None;
        }
        let j = rng.random_range(self.next..self.perm.len());
        self.perm.swap(self.next, j);
        self.next += 1;
        Some(self.perm[self.next - 1])
    }
}

/// `V` distinct patches drawn uniformly without replacement over all
/// `(image, position)` pairs, flattened and L2-normalized. Duplicate and
/// all-zero patches are skipped and redrawn.
pub fn build_random_patches(images: &[Image], size: usize, patch_size: usize, seed: u64, norm: PatchNorm) -> Result<Vocabulary> {
    let pool = PatchPool::new(images, patch_size)?;
    if pool.len() < size {
        bail!(Capacity, "{} patches available, vocabulary needs {}", pool.len(), size);
    }
    let mut rng = seeded(derive_seed(seed, &[0x9A1]));
    let mut stream = WithoutReplacement::new(pool.len());
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(size * 3 * patch_size * patch_size);
    let mut taken = 0;
    while taken < size {
        let Some(index) = stream.draw(&mut rng) else {
            bail!(Capacity, "only {} distinct non-zero patches available, vocabulary needs {}", taken, size);
        };
        let mut v = norm.apply(&pool.patch(index));
        if unit(&mut v) && seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
            rows.extend_from_slice(&v);
            taken += 1;
        }
    }
    let dim = 3 * patch_size * patch_size;
    Vocabulary::new(VocabKind::RandomPatches, seed, norm, Tensor::new(&[size, dim], rows)?)
}

/// Settings for [`build_kmeans`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct KMeansSettings {
    pub sample_budget: usize,
    pub iters: usize,
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        Self {
            sample_budget: 200_000,
            iters: 25,
            tol: 1e-4,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding on up to `sample_budget`
/// uniformly sampled patches; centroids are L2-normalized at the end.
pub fn build_kmeans(
    images: &[Image],
    size: usize,
    patch_size: usize,
    settings: &KMeansSettings,
    seed: u64,
    norm: PatchNorm,
) -> Result<Vocabulary> {
    if settings.sample_budget < size {
        bail!(Capacity, "k-means sample budget {} is below the vocabulary size {}", settings.sample_budget, size);
    }
    let pool = PatchPool::new(images, patch_size)?;
    let count = settings.sample_budget.min(pool.len());
    if count < size {
        bail!(Capacity, "{} patches available, vocabulary needs {}", pool.len(), size);
    }
    let dim = 3 * patch_size * patch_size;
    let mut rng = seeded(derive_seed(seed, &[0x9A2]));
    let mut stream = WithoutReplacement::new(pool.len());
    let mut points = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let index = stream.draw(&mut rng).expect("count ≤ pool size");
        points.extend(norm.apply(&pool.patch(index)).into_iter().map(f64::from));
    }
    let init = kmeans_plus_plus_init(&points, dim, size, &mut rng)?;
    let outcome = lloyd(&points, dim, init, settings.iters, settings.tol);
    let mut rows: Vec<f32> = Vec::with_capacity(size * dim);
    let mut seen = BTreeSet::new();
    for (c, centroid) in outcome.centroids.chunks_exact(dim).enumerate() {
        let mut v: Vec<f32> = centroid.iter().map(|&x| x as f32).collect();
        if !unit(&mut v) || !seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
            // degenerate centroid: fall back to a distinct random direction
            let mut fallback = seeded(derive_seed(seed, &[0x9A3, c as u64]));
            loop {
                let mut r: Vec<f32> = (0..dim).map(|_| fallback.random::<f32>() * 2.0 - 1.0).collect();
                if unit(&mut r) && seen.insert(r.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
                    v = r;
                    break;
                }
            }
        }
        rows.extend_from_slice(&v);
    }
    Vocabulary::new(VocabKind::Kmeans, seed, norm, Tensor::new(&[size, dim], rows)?)
}

/// Index of the vocabulary row with the largest dot product with `patch`
/// (smallest index on ties).
pub fn tokenize(patch: &[f32], vocab: &Vocabulary) -> Result<usize> {
    if patch.len() != vocab.dim() {
        bail!(Dimension, "patch has {} components, vocabulary expects {}", patch.len(), vocab.dim());
    }
    let x = vocab.norm().apply(patch);
    let mut best = 0;
    let mut best_score = f32::NEG_INFINITY;
    for i in 0..vocab.size() {
        let s = dot(&x, vocab.row(i));
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// Tokens of every patch in grid order.
pub fn tokenize_image(image: &Image, vocab: &Vocabulary, patch_size: usize) -> Result<Vec<usize>> {
    let seq = patchify(image, patch_size)?;
    (0..seq.n()).map(|i| tokenize(seq.patch(i), vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::rng::normal;
    use alloc::vec;

    fn orthonormal(v: usize, d: usize) -> Vocabulary {
        let mut rows = vec![0.0f32; v * d];
        for i in 0..v {
            rows[i * d + i] = 1.0;
        }
        Vocabulary::new(VocabKind::RandomProjection, 0, PatchNorm::None, Tensor::new(&[v, d], rows).unwrap()).unwrap()
    }

    fn naive_argmax(patch: &[f32], vocab: &Vocabulary) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..vocab.size() {
            let mut s = 0.0f64;
            for j in 0..patch.len() {
                s += patch[j] as f64 * vocab.row(i)[j] as f64;
            }
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        best
    }

    #[test]
    fn random_projection_rows_are_unit_and_seeded() {
        let a = build_random_projection(64, 48, 1).unwrap();
        let b = build_random_projection(64, 48, 1).unwrap();
        let c = build_random_projection(64, 48, 2).unwrap();
        assert_eq!(a, b);
        for i in 0..64 {
            let n: f64 = a.row(i).iter().map(|&x| x as f64 * x as f64).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
            let max_cos = (0..64)
                .map(|j| dot(a.row(i), c.row(j)))
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(max_cos < 0.999);
        }
        assert!(build_random_projection(1, 4, 0).is_err());
        assert!(build_random_projection(2, 1, 0).is_ok());
        assert!(build_random_projection(3, 1, 0).is_err());
    }

    #[test]
    fn full_size_random_projection() {
        let v = build_random_projection(8192, 192, 0).unwrap();
        assert_eq!((v.size(), v.dim()), (8192, 192));
    }

    #[test]
    fn tokenize_orthonormal_and_scale_invariance() {
        let vocab = orthonormal(8, 8);
        let mut e3 = vec![0.0; 8];
        e3[3] = 1.0;
        assert_eq!(tokenize(&e3, &vocab).unwrap(), 3);
        let scaled: Vec<f32> = e3.iter().map(|v| v * 7.5).collect();
        assert_eq!(tokenize(&scaled, &vocab).unwrap(), 3);
        assert!(tokenize(&[0.0; 7], &vocab).is_err());
        // zero patch ties everywhere and maps to 0
        assert_eq!(tokenize(&[0.0; 8], &vocab).unwrap(), 0);
    }

    #[test]
    fn tokenize_matches_naive_oracle() {
        let vocab = build_random_projection(256, 48, 3).unwrap();
        let mut rng = seeded(4);
        for _ in 0..1000 {
            let patch: Vec<f32> = (0..48).map(|_| normal(&mut rng) as f32).collect();
            let t = tokenize(&patch, &vocab).unwrap();
            assert_eq!(t, naive_argmax(&patch, &vocab));
            let c = rng.random::<f32>() * 10.0 + 0.01;
            let scaled: Vec<f32> = patch.iter().map(|v| v * c).collect();
            assert_eq!(tokenize(&scaled, &vocab).unwrap(), t);
        }
    }

    #[test]
    fn own_rows_tokenize_to_their_index() {
        let vocab = build_random_projection(128, 12, 5).unwrap();
        for i in 0..128 {
            assert_eq!(tokenize(vocab.row(i), &vocab).unwrap(), i);
        }
    }

    #[test]
    fn tokenize_image_shape_and_constant_image() {
        let vocab = build_random_projection(32, 192, 6).unwrap();
        let img = Image::filled(32, 32, [0.3, 0.6, 0.1]);
        let tokens = tokenize_image(&img, &vocab, 8).unwrap();
        assert_eq!(tokens.len(), 16);
        assert!(tokens.iter().all(|&t| t == tokens[0]));
    }

    #[test]
    fn tokenize_image_matches_per_patch_oracle() {
        let vocab = build_random_projection(64, 192, 7).unwrap();
        let data = synth_generate(8, 100, 1, 4, 32).unwrap();
        for img in data.train.images() {
            let tokens = tokenize_image(img, &vocab, 8).unwrap();
            let seq = patchify(img, 8).unwrap();
            for (i, &t) in tokens.iter().enumerate() {
                assert_eq!(t, naive_argmax(seq.patch(i), &vocab));
            }
        }
    }

    fn distinct_patch_images() -> Vec<Image> {
        // two 8×8 images with four 4×4 patches each, all patches distinct
        (0..2)
            .map(|k| {
                let mut data = vec![0.0f32; 3 * 64];
                for c in 0..3 {
                    for y in 0..8 {
                        for x in 0..8 {
                            let patch = (y / 4) * 2 + x / 4 + 4 * k;
                            data[c * 64 + y * 8 + x] = if c == patch % 3 { 1.0 } else { (patch as f32 + 1.0) / 10.0 };
                        }
                    }
                }
                Image::new(8, 8, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn random_patches_with_exactly_v_patches() {
        let images = distinct_patch_images();
        let vocab = build_random_patches(&images, 8, 4, 1, PatchNorm::None).unwrap();
        let pool = PatchPool::new(&images, 4).unwrap();
        let mut expected: Vec<Vec<u32>> = (0..8)
            .map(|i| {
                let mut v = pool.patch(i);
                unit(&mut v);
                v.iter().map(|x| x.to_bits()).collect()
            })
            .collect();
        let mut got: Vec<Vec<u32>> = (0..8).map(|i| vocab.row(i).iter().map(|x| x.to_bits()).collect()).collect();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
        assert!(matches!(
            build_random_patches(&images, 9, 4, 1, PatchNorm::None),
            Err(crate::Error::Capacity(_))
        ));
    }

    #[test]
    fn random_patches_rejects_duplicates() {
        // constant images: every patch identical up to image color, 3 distinct directions
        let images: Vec<Image> = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.5]]
            .iter()
            .map(|&c| Image::filled(8, 8, c))
            .collect();
        let vocab = build_random_patches(&images, 3, 4, 2, PatchNorm::None).unwrap();
        assert_eq!(vocab.size(), 3);
        assert!(matches!(
            build_random_patches(&images, 4, 4, 2, PatchNorm::None),
            Err(crate::Error::Capacity(_))
        ));
    }

    #[test]
    fn random_patch_draws_are_uniform_over_positions() {
        // one 16×16 image with 16 distinct 4×4 patches; 5·10⁴ two-row builds = 10⁵ draws
        let mut data = vec![0.0f32; 3 * 256];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let k = (y / 4) * 4 + x / 4;
                    data[c * 256 + y * 16 + x] = if c == 0 { (k + 1) as f32 / 16.0 } else { 0.5 };
                }
            }
        }
        let images = vec![Image::new(16, 16, data).unwrap()];
        let pool = PatchPool::new(&images, 4).unwrap();
        let keys: Vec<Vec<u32>> = (0..16)
            .map(|i| {
                let mut v = pool.patch(i);
                unit(&mut v);
                v.iter().map(|x| x.to_bits()).collect()
            })
            .collect();
        let mut counts = vec![0usize; 16];
        let builds = 50_000u64;
        for seed in 0..builds {
            let vocab = build_random_patches(&images, 2, 4, seed, PatchNorm::None).unwrap();
            for r in 0..2 {
                let key: Vec<u32> = vocab.row(r).iter().map(|x| x.to_bits()).collect();
                counts[keys.iter().position(|k| *k == key).unwrap()] += 1;
            }
        }
        let draws = 2.0 * builds as f64;
        let expected = draws / 16.0;
        let sigma = (draws * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{:?}", counts);
        }
        // 15 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 37.7, "chi2 = {}", chi2);
    }

    #[test]
    fn kmeans_recovers_well_separated_points() {
        // V distinct colors, each image one constant color => V patch directions
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let images: Vec<Image> = colors.iter().map(|&c| Image::filled(8, 8, c)).collect();
        let settings = KMeansSettings {
            sample_budget: 16,
            iters: 25,
            tol: 1e-4,
        };
        let vocab = build_kmeans(&images, 4, 4, &settings, 3, PatchNorm::None).unwrap();
        for c in colors {
            let mut v = patchify(&Image::filled(4, 4, c), 4).unwrap().patches.into_data();
            unit(&mut v);
            let best = (0..4).map(|i| dot(&v, vocab.row(i))).fold(f32::NEG_INFINITY, f32::max);
            assert!((best - 1.0).abs() < 1e-5);
        }
        assert!(matches!(
            build_kmeans(&images, 4, 4, &KMeansSettings { sample_budget: 3, ..settings }, 3, PatchNorm::None),
            Err(crate::Error::Capacity(_))
        ));
    }

    #[test]
    fn patch_mean_normalization_is_recorded() {
        let data = synth_generate(1, 8, 1, 4, 16).unwrap();
        let vocab = build_random_patches(data.train.images(), 16, 8, 1, PatchNorm::PatchMean).unwrap();
        assert_eq!(vocab.norm(), PatchNorm::PatchMean);
        let t = tokenize_image(data.train.image(0), &vocab, 8).unwrap();
        assert_eq!(t.len(), 4);
    }
}
