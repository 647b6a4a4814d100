//! Multi-domain image datasets: the synthetic generator, PPM tree I/O,
//! leave-one-domain-out splits, and seeded batch sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_from_seed, SeedTree};

pub const MANIFEST_FILE: &str = "manifest.json";

/// An `H×W×3` image with values in `[0, 1]`, cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Arc<[f64]>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    /// Class index into the corpus class list; possibly a corrupted label.
    pub label: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    name: String,
    samples: Vec<LabeledSample>,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, samples: Vec<LabeledSample>) -> Result<Self> {
        let name = name.into();
        let mut ids = HashSet::with_capacity(samples.len());
        let shape = samples.first().map(|s| s.image.shape());
        for s in &samples {
            if Some(s.image.shape()) != shape {
                return Err(Error::InvalidArgument(format!(
                    "domain '{name}': sample '{}' has shape {:?}, expected {:?}",
                    s.id,
                    s.image.shape(),
                    shape.unwrap_or_default()
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("domain '{name}': duplicate sample id '{}'", s.id)));
            }
        }
        Ok(Self { name, samples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same domain with every label passed through `relabel`.
    pub fn map_labels(&self, mut relabel: impl FnMut(&LabeledSample) -> usize) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| LabeledSample {
                label: relabel(s),
                ..s.clone()
            })
            .collect();
        Self {
            name: self.name.clone(),
            samples,
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&LabeledSample) -> bool) -> Self {
        Self {
            name: self.name.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// All domains of one dataset plus the class-name table labels index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub domains: Vec<DomainDataset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    pub image_shape: [usize; 3],
}

impl Corpus {
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.domains
            .iter()
            .flat_map(|d| d.samples.first())
            .map(|s| s.image.shape())
            .next()
    }

    pub fn domain(&self, name: &str) -> Result<&DomainDataset> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn num_samples(&self) -> usize {
        self.domains.iter().map(DomainDataset::len).sum()
    }

    pub fn manifest(&self) -> Manifest {
        let (h, w) = self.image_shape().unwrap_or((0, 0));
        Manifest {
            domains: self.domain_names(),
            classes: self.classes.clone(),
            image_shape: [h, w, 3],
        }
    }

    /// Source-domain samples of known classes only.
    pub fn training_domains(&self, split: &SplitSpec) -> Result<Vec<DomainDataset>> {
        self.domain(&split.test_domain)?;
        let known: HashSet<usize> = split.known_classes.iter().copied().collect();
        let out: Vec<DomainDataset> = self
            .domains
            .iter()
            .filter(|d| d.name != split.test_domain)
            .map(|d| d.filter(|s| known.contains(&s.label)))
            .collect();
        assert_training_pool(&out, split);
        Ok(out)
    }

    /// All samples of the held-out domain, known and unknown classes alike.
    pub fn test_domain(&self, split: &SplitSpec) -> Result<&DomainDataset> {
        self.domain(&split.test_domain)
    }
}

/// Panics if a training pool contains test-domain or unknown-class samples.
pub fn assert_training_pool(domains: &[DomainDataset], split: &SplitSpec) {
    for d in domains {
        assert_ne!(d.name, split.test_domain, "test domain leaked into training pool");
        for s in &d.samples {
            assert!(
                split.unknown_classes.binary_search(&s.label).is_err(),
                "unknown class {} leaked into training pool via '{}'",
                s.label,
                s.id
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_domain: String,
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn is_known(&self, label: usize) -> bool {
        self.known_classes.binary_search(&label).is_ok()
    }
}

/// Holds out `test_domain` and marks the last `num_unknown` classes as unseen.
pub fn make_split(corpus: &Corpus, test_domain: &str, num_unknown: usize) -> Result<SplitSpec> {
    corpus.domain(test_domain)?;
    let total = corpus.classes.len();
    if num_unknown == 0 || num_unknown >= total {
        return Err(Error::InvalidArgument(format!(
            "num_unknown must lie in [1, {total}), got {num_unknown}"
        )));
    }
    Ok(SplitSpec {
        test_domain: test_domain.to_string(),
        known_classes: (0..total - num_unknown).collect(),
        unknown_classes: (total - num_unknown..total).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Corpus> {
        generate_synthetic(
            self.num_domains,
            self.num_classes,
            self.per_class,
            self.seed,
            (self.height, self.width),
        )
    }
}

pub fn class_name(k: usize) -> String {
    format!("c{k:02}")
}

pub fn domain_name(d: usize) -> String {
    format!("d{d}")
}

/// Binary necklaces of length `len` (smallest rotation) that map onto
/// themselves under reversal, so no code is the mirror image of another.
/// All-zeros and all-ones are excluded; order is set-bit count, then value.
fn necklaces(len: usize) -> Vec<u32> {
    let mask = (1u32 << len) - 1;
    let rotate = |v: u32, r: usize| ((v << r) | (v >> (len - r))) & mask;
    let canonical = |v: u32| (0..len).map(|r| rotate(v, r)).min().unwrap_or(v);
    let reverse = |v: u32| v.reverse_bits() >> (32 - len);
    let mut out: Vec<u32> = (1..mask)
        .filter(|&v| canonical(v) == v && canonical(reverse(v)) == v)
        .filter(|&v| (1..len).all(|r| rotate(v, r) != v))
        .collect();
    out.sort_by_key(|&v| (v.count_ones(), v));
    out
}

/// Which rows carry ink for class `k`. The class code is a binary necklace
/// repeated down the image, so every local window sees the same pattern.
pub fn bar_code_rows(k: usize, height: usize) -> Vec<bool> {
    let (len, code) = (2..=16)
        .find_map(|len| {
            let n = necklaces(len);
            (n.len() > k).then(|| (len, n[k]))
        })
        .expect("class index small enough for a 16-bit necklace");
    (0..height).map(|r| code >> (len - 1 - r % len) & 1 == 1).collect()
}

/// Number of distinct codes available, used to bound `num_classes`.
fn code_len_for(num_classes: usize) -> usize {
    (2..=16).find(|&len| necklaces(len).len() >= num_classes).unwrap_or(16)
}

const INK: [f64; 3] = [0.80, 0.65, 0.55];
const PAPER: [f64; 3] = [0.20, 0.35, 0.45];
const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]];

/// Style of domain `d`: channel permutation, brightness offset, pixel noise level.
pub fn domain_style(d: usize) -> ([usize; 3], f64, f64) {
    let perm = PERMUTATIONS[d % PERMUTATIONS.len()];
    let offset = 0.08 * ((d % 3) as f64 - 1.0);
    let noise = 0.10 + 0.05 * (d % 4) as f64;
    (perm, offset, noise)
}

/// Deterministic stand-in for a multi-domain benchmark. Class evidence is a
/// horizontal bar code; domains differ only in colour, brightness, and noise.
pub fn generate_synthetic(
    num_domains: usize,
    num_classes: usize,
    per_class: usize,
    seed: u64,
    shape: (usize, usize),
) -> Result<Corpus> {
    let (height, width) = shape;
    if num_domains < 3 || num_classes < 4 || per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "need >= 3 domains, >= 4 classes, >= 1 sample per class; got {num_domains}, {num_classes}, {per_class}"
        )));
    }
    if height < 4 || width < 4 || code_len_for(num_classes) > height {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} too small for {num_classes} bar codes"
        )));
    }
    let tree = SeedTree::new(seed);
    let codes: Vec<Vec<bool>> = (0..num_classes).map(|k| bar_code_rows(k, height)).collect();
    let mut domains = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let (perm, offset, sigma) = domain_style(d);
        let ink: [f64; 3] = std::array::from_fn(|c| INK[perm[c]] + offset);
        let paper: [f64; 3] = std::array::from_fn(|c| PAPER[perm[c]] + offset);
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let mut samples = Vec::with_capacity(num_classes * per_class);
        for (k, rows) in codes.iter().enumerate() {
            for i in 0..per_class {
                let id = format!("d{d}_c{k:02}_{i:04}");
                let mut rng = stream_from_seed(tree.seed_for(&id));
                let mut data = Vec::with_capacity(height * width * 3);
                for &on in rows {
                    let base = if on { ink } else { paper };
                    for _ in 0..width {
                        for &b in &base {
                            data.push((b + normal.sample(&mut rng)).clamp(0.0, 1.0));
                        }
                    }
                }
                samples.push(LabeledSample {
                    id,
                    image: Image::new(height, width, data)?,
                    label: k,
                    domain: domain_name(d),
                });
            }
        }
        domains.push(DomainDataset::new(domain_name(d), samples)?);
    }
    Ok(Corpus {
        classes: (0..num_classes).map(class_name).collect(),
        domains,
    })
}

/// Parses a binary (`P6`, maxval 255) PPM image, scaling bytes to `[0, 1]`.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::format(path, "missing PPM header"))?;
    if magic != b"P6" {
        let magic = String::from_utf8_lossy(magic).into_owned();
        if magic.starts_with('P') && magic.len() == 2 {
            return Err(Error::UnsupportedPpm {
                path: path.to_path_buf(),
                magic,
            });
        }
        return Err(Error::format(path, "not a PPM file"));
    }
    let mut field = |what: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| Error::format(path, format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("malformed {what}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(Error::format(
            path,
            format!("expected {need} raster bytes, found {}", raster.len()),
        ));
    }
    Image::new(height, width, raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads `root/<domain>/<class_name>/<id>.ppm`. Classes are indexed by the
/// sorted union of class directory names; a `manifest.json`, when present,
/// must agree with the tree.
pub fn load_ppm_tree(root: &Path) -> Result<Corpus> {
    let domain_names = sorted_subdirs(root)?;
    if domain_names.is_empty() {
        return Err(Error::format(root, "no domain directories"));
    }
    let mut per_domain: Vec<(String, Vec<String>)> = Vec::new();
    let mut all_classes = BTreeSet::new();
    for d in &domain_names {
        let classes = sorted_subdirs(&root.join(d))?;
        all_classes.extend(classes.iter().cloned());
        per_domain.push((d.clone(), classes));
    }
    let classes: Vec<String> = all_classes.into_iter().collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut shape: Option<((usize, usize), std::path::PathBuf)> = None;
    let mut domains = Vec::new();
    for (d, class_dirs) in &per_domain {
        let mut samples = Vec::new();
        for c in class_dirs {
            let dir = root.join(d).join(c);
            let mut files: Vec<_> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
                .collect::<Result<Vec<_>>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
            files.sort();
            if files.is_empty() {
                return Err(Error::format(&dir, "class directory contains no .ppm files"));
            }
            for path in files {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let image = parse_ppm(&bytes, &path)?;
                match &shape {
                    None => shape = Some((image.shape(), path.clone())),
                    Some((s, first)) if *s != image.shape() => {
                        return Err(Error::format(
                            &path,
                            format!(
                                "image is {}x{} but {} is {}x{}",
                                image.height,
                                image.width,
                                first.display(),
                                s.0,
                                s.1
                            ),
                        ));
                    }
                    Some(_) => {}
                }
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                samples.push(LabeledSample {
                    id,
                    image,
                    label: index[c.as_str()],
                    domain: d.clone(),
                });
            }
        }
        domains.push(DomainDataset::new(d.clone(), samples)?);
    }
    let corpus = Corpus { classes, domains };
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let found = corpus.manifest();
        if manifest.classes != found.classes || manifest.domains != found.domains {
            return Err(Error::format(&manifest_path, "manifest disagrees with directory tree"));
        }
        if manifest.image_shape != found.image_shape {
            return Err(Error::format(&manifest_path, "manifest image_shape disagrees with images"));
        }
    }
    Ok(corpus)
}

/// Writes the corpus as a PPM tree plus `manifest.json`.
pub fn write_ppm_tree(root: &Path, corpus: &Corpus) -> Result<()> {
    for d in &corpus.domains {
        for s in d.samples() {
            let dir = root.join(&d.name).join(&corpus.classes[s.label]);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{}.ppm", s.id));
            fs::write(&path, encode_ppm(&s.image)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut file, &corpus.manifest())?;
    file.write_all(b"\n").map_err(|e| Error::io(&path, e))
}

/// Uniform draw of `size` elements: without replacement when the pool is
/// large enough, with replacement otherwise.
pub fn sample_batch<T: Clone>(pool: &[T], size: usize, rng: &mut impl Rng) -> Result<Vec<T>> {
    if pool.is_empty() {
        return Err(Error::Empty("cannot sample a batch from an empty pool".into()));
    }
    if size <= pool.len() {
        Ok(index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect())
    } else {
        Ok((0..size).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect())
    }
}

/// For each reference label, one uniform draw among pool elements of a different class.
pub fn sample_batch_different_classes<T: Clone>(
    pool: &[T],
    reference_labels: &[usize],
    label_of: impl Fn(&T) -> usize,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in pool.iter().enumerate() {
        by_label.entry(label_of(item)).or_default().push(i);
    }
    reference_labels
        .iter()
        .map(|&avoid| {
            let own = by_label.get(&avoid).map_or(0, Vec::len);
            let candidates = pool.len() - own;
            if candidates == 0 {
                return Err(Error::InvalidArgument(format!(
                    "pool has no sample with a class other than {avoid}"
                )));
            }
            let mut pick = rng.random_range(0..candidates);
            for (&label, members) in &by_label {
                if label == avoid {
                    continue;
                }
                if pick < members.len() {
                    return Ok(pool[members[pick]].clone());
                }
                pick -= members.len();
            }
            unreachable!("pick is bounded by the candidate count")
        })
        .collect()
}

/// Stacks images into a `[B,H,W,3]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut shape = None;
    for img in images {
        if *shape.get_or_insert(img.shape()) != img.shape() {
            return Err(Error::InvalidArgument("cannot stack images of different shapes".into()));
        }
        data.extend_from_slice(img.data());
        count += 1;
    }
    let (h, w) = shape.ok_or_else(|| Error::Empty("no images to stack".into()))?;
    Tensor::new(vec![count, h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Corpus {
        generate_synthetic(3, 4, 3, 9, (8, 6)).unwrap()
    }

    #[test]
    fn synthetic_generation_is_deterministic_and_sized() {
        let a = small();
        assert_eq!(a, small());
        assert_ne!(a, generate_synthetic(3, 4, 3, 10, (8, 6)).unwrap());
        let big = generate_synthetic(4, 6, 50, 1, (16, 16)).unwrap();
        assert_eq!(big.num_samples(), 1200);
        assert_eq!(big.classes, vec!["c00", "c01", "c02", "c03", "c04", "c05"]);
        assert!(big
            .domains
            .iter()
            .flat_map(|d| d.samples())
            .all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn class_codes_are_shared_across_domains_and_distinct_across_classes() {
        let corpus = generate_synthetic(3, 7, 1, 2, (16, 4)).unwrap();
        let codes: Vec<Vec<bool>> = (0..7).map(|k| bar_code_rows(k, 16)).collect();
        for k in 0..7 {
            for j in 0..k {
                assert_ne!(codes[k], codes[j], "classes {j} and {k} share a code");
            }
        }
        let a = &corpus.domains[0].samples()[3];
        let b = &corpus.domains[1].samples()[3];
        assert_eq!(a.label, b.label);
        // Ink rows are brighter in the ink's dominant channel of each domain.
        let (pa, _, _) = domain_style(0);
        let (pb, _, _) = domain_style(1);
        assert_ne!(pa, pb);
        let mean = |s: &LabeledSample, c: usize| {
            s.image.data().iter().skip(c).step_by(3).sum::<f64>() / (16.0 * 4.0)
        };
        let shift: f64 = (0..3).map(|c| (mean(a, c) - mean(b, c)).abs()).sum();
        assert!(shift > 0.1, "{shift}");
        for (r, &on) in codes[3].iter().enumerate() {
            let ink_a = a.image.pixel(r, 0)[pa.iter().position(|&p| p == 0).unwrap()];
            let ink_b = b.image.pixel(r, 0)[pb.iter().position(|&p| p == 0).unwrap()];
            assert_eq!(ink_a > 0.5, on);
            assert_eq!(ink_b > 0.5, on);
        }
    }

    #[test]
    fn codes_are_distinct_under_rotation_and_reflection() {
        assert_eq!(necklaces(5).len(), 6);
        assert_eq!(necklaces(6).len(), 7);
        // 60 rows hold a whole number of periods for every code used here.
        let h = 60;
        let rows: Vec<Vec<bool>> = (0..10).map(|k| bar_code_rows(k, h)).collect();
        for a in 0..rows.len() {
            for b in 0..rows.len() {
                if a == b {
                    continue;
                }
                for shift in 0..h {
                    let rotated: Vec<bool> = (0..h).map(|r| rows[b][(r + shift) % h]).collect();
                    let mirrored: Vec<bool> = rotated.iter().rev().copied().collect();
                    assert_ne!(rows[a], rotated, "classes {a} and {b}");
                    assert_ne!(rows[a], mirrored, "classes {a} and {b}");
                }
            }
        }
    }

    #[test]
    fn invalid_synthetic_sizes_are_rejected() {
        assert!(generate_synthetic(2, 4, 1, 0, (8, 8)).is_err());
        assert!(generate_synthetic(3, 3, 1, 0, (8, 8)).is_err());
        assert!(generate_synthetic(3, 4, 0, 0, (8, 8)).is_err());
    }

    #[test]
    fn split_examples() {
        let corpus = generate_synthetic(3, 7, 1, 0, (8, 4)).unwrap();
        let s = make_split(&corpus, "d2", 1).unwrap();
        assert_eq!(s.unknown_classes, vec![6]);
        assert_eq!(s.known_classes, (0..6).collect::<Vec<_>>());
        let corpus = generate_synthetic(3, 10, 1, 0, (8, 4)).unwrap();
        assert_eq!(make_split(&corpus, "d0", 4).unwrap().unknown_classes, vec![6, 7, 8, 9]);
        assert!(make_split(&corpus, "d0", 10).is_err());
        assert!(make_split(&corpus, "d0", 0).is_err());
        assert!(matches!(make_split(&corpus, "nope", 1), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn training_pool_excludes_test_domain_and_unknown_classes() {
        let corpus = generate_synthetic(4, 5, 2, 0, (8, 4)).unwrap();
        let split = make_split(&corpus, "d1", 2).unwrap();
        let train = corpus.training_domains(&split).unwrap();
        assert_eq!(train.len(), 3);
        assert!(train.iter().all(|d| d.name() != "d1"));
        assert!(train.iter().flat_map(|d| d.samples()).all(|s| s.label < 3));
        assert_eq!(train.iter().map(DomainDataset::len).sum::<usize>(), 3 * 3 * 2);
    }

    #[test]
    fn ppm_parse_and_encode() {
        let img = Image::new(2, 3, (0..18).map(|v| v as f64 / 17.0).collect()).unwrap();
        let bytes = encode_ppm(&img);
        let back = parse_ppm(&bytes, Path::new("x.ppm")).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let with_comment = b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff";
        let px = parse_ppm(with_comment, Path::new("c.ppm")).unwrap();
        assert_eq!(px.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn ppm_errors_name_the_problem() {
        let p = Path::new("bad.ppm");
        let err = parse_ppm(b"P3\n1 1\n255\n0 0 0\n", p).unwrap_err();
        assert!(err.to_string().contains("unsupported PPM variant"), "{err}");
        assert!(parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0", p).is_err());
        assert!(parse_ppm(b"P6\n2 1\n255\n\0\0\0", p).is_err());
        assert!(parse_ppm(b"JFIF", p).is_err());
        assert!(parse_ppm(b"P6\nx 1\n255\n", p).unwrap_err().to_string().contains("bad.ppm"));
    }

    #[test]
    fn batch_sampling_examples() {
        let pool: Vec<usize> = (0..10).collect();
        let mut rng = stream_from_seed(3);
        let mut perm = sample_batch(&pool, 10, &mut rng).unwrap();
        perm.sort();
        assert_eq!(perm, pool);
        let a = sample_batch(&pool, 4, &mut stream_from_seed(8)).unwrap();
        let b = sample_batch(&pool, 4, &mut stream_from_seed(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_batch(&pool, 25, &mut rng).unwrap().len(), 25);
        assert!(sample_batch::<usize>(&[], 1, &mut rng).is_err());
    }

    #[test]
    fn batch_draws_are_uniform() {
        // Chi-square goodness of fit over 10^5 single draws from 10 items.
        let pool: Vec<usize> = (0..10).collect();
        let mut rng = stream_from_seed(17);
        let mut counts = [0f64; 10];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_batch(&pool, 1, &mut rng).unwrap()[0]] += 1.0;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 9 degrees of freedom: mean 9, sd sqrt(18); 9 + 3·4.24 ≈ 21.7.
        assert!(chi2 < 21.7, "chi2 {chi2}");
    }

    #[test]
    fn different_class_sampling() {
        let pool = vec![(0usize, 0usize), (1, 1), (2, 1), (3, 0)];
        let mut rng = stream_from_seed(1);
        let out = sample_batch_different_classes(&pool, &[0, 0, 0], |p| p.1, &mut rng).unwrap();
        assert!(out.iter().all(|p| p.1 == 1));
        let pool3: Vec<(usize, usize)> = (0..30).map(|i| (i, i % 3)).collect();
        let refs = [0, 1, 0, 1, 1];
        let out = sample_batch_different_classes(&pool3, &refs, |p| p.1, &mut rng).unwrap();
        assert!(out.iter().zip(&refs).all(|(p, &r)| p.1 != r));
        let a = sample_batch_different_classes(&pool3, &refs, |p| p.1, &mut stream_from_seed(5)).unwrap();
        let b = sample_batch_different_classes(&pool3, &refs, |p| p.1, &mut stream_from_seed(5)).unwrap();
        assert_eq!(a, b);
        let single = vec![(0usize, 2usize), (1, 2)];
        assert!(sample_batch_different_classes(&single, &[2], |p| p.1, &mut rng).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let img = Image::new(1, 1, vec![0.0; 3]).unwrap();
        let s = LabeledSample {
            id: "a".into(),
            image: img,
            label: 0,
            domain: "d".into(),
        };
        assert!(DomainDataset::new("d", vec![s.clone(), s]).is_err());
    }
}
