//! Private-shard construction: Dirichlet non-IID partitioning, stratified
//! holdout splits, synthetic desk-scale datasets, and a PNG-directory loader
//! so real data can be dropped in without code changes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchgen::SourceImage;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// In-memory labelled image dataset, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledDataset {
    /// `[M, C, H, W]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl LabelledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, name: String) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::InputShape {
                expected: vec![labels.len()],
                got: vec![inputs.rows()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize], name: String) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name,
        })
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut per_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l].push(i);
        }
        per_class
    }
}

/// Per-client index lists into one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }
}

/// Per-class Dirichlet(alpha) split: each class's shuffled indices are
/// assigned to clients by drawn proportions. Lower alpha means more skew.
/// Empty clients are repaired by stealing one index from the largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::InvalidConfig("n_clients must be >= 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "dirichlet alpha must be > 0, got {alpha}"
        )));
    }
    if n_clients > labels.len() {
        return Err(Error::TooManyClients {
            clients: n_clients,
            samples: labels.len(),
        });
    }

    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut client_indices = vec![Vec::new(); n_clients];
    let mut rng = stream(seed, Purpose::Partition, &[]);

    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let proportions = dirichlet_draw(alpha, n_clients, &mut rng)?;
        // Cumulative-rounded boundaries split the shuffled members.
        let m = members.len();
        let mut start = 0usize;
        let mut cum = 0.0f64;
        for (k, &p) in proportions.iter().enumerate() {
            cum += p;
            let end = if k + 1 == n_clients {
                m
            } else {
                ((cum * m as f64).round() as usize).clamp(start, m)
            };
            client_indices[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    // Repair empty clients.
    loop {
        let Some(empty) = client_indices.iter().position(|c| c.is_empty()) else {
            break;
        };
        let donor = client_indices
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if client_indices[donor].len() <= 1 {
            return Err(Error::TooManyClients {
                clients: n_clients,
                samples: labels.len(),
            });
        }
        let moved = client_indices[donor].pop().unwrap();
        client_indices[empty].push(moved);
    }

    for c in client_indices.iter_mut() {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices,
        alpha,
        seed,
    })
}

/// Symmetric Dirichlet(alpha) draw via normalized Gamma(alpha, 1) samples.
fn dirichlet_draw(
    alpha: f64,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gamma =
        Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidConfig(format!("dirichlet: {e}")))?;
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        // All-zero gammas can happen at tiny alpha; fall back to a one-hot
        // draw, which is the alpha -> 0 limit.
        let hot = rng.random_range(0..n);
        draws.iter_mut().for_each(|v| *v = 0.0);
        draws[hot] = 1.0;
        return Ok(draws);
    }
    draws.iter_mut().for_each(|v| *v /= total);
    Ok(draws)
}

/// Seeded stratified split; validation receives `round(fraction * M)` items
/// with per-class proportions within one item of the overall fraction.
pub fn holdout_split(
    ds: &LabelledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabelledDataset, LabelledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let m = ds.len();
    let target_total = (fraction * m as f64).round() as usize;
    let per_class = ds.class_indices();

    // Largest-remainder allocation of the validation quota across classes.
    let mut quotas: Vec<usize> = Vec::with_capacity(per_class.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(per_class.len());
    let mut allocated = 0usize;
    for (c, members) in per_class.iter().enumerate() {
        let exact = fraction * members.len() as f64;
        let q = (exact.floor() as usize).min(members.len());
        quotas.push(q);
        allocated += q;
        remainders.push((exact - exact.floor(), c));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = target_total.saturating_sub(allocated);
    for &(_, c) in &remainders {
        if leftover == 0 {
            break;
        }
        if quotas[c] < per_class[c].len() {
            quotas[c] += 1;
            leftover -= 1;
        }
    }

    let mut rng = stream(seed, Purpose::Holdout, &[]);
    let mut val_idx = Vec::with_capacity(target_total);
    let mut train_idx = Vec::with_capacity(m - target_total);
    for (c, members) in per_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        val_idx.extend_from_slice(&shuffled[..quotas[c]]);
        train_idx.extend_from_slice(&shuffled[quotas[c]..]);
    }
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    Ok((
        ds.subset(&train_idx, format!("{}/train", ds.name))?,
        ds.subset(&val_idx, format!("{}/val", ds.name))?,
    ))
}

/// Synthetic class-conditional texture generator. Every class has a base
/// color, wave frequency and orientation derived from the seed; `separation`
/// in `(0, 1]` scales color contrast up and pixel noise down.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    base: [f32; 3],
    freq: f32,
    orient: f32,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("synth classes must be >= 2".into()));
        }
        if self.image_size < 4 {
            return Err(Error::InvalidConfig("synth image_size must be >= 4".into()));
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return Err(Error::InvalidConfig(
                "synth separation must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn style(&self, class: usize) -> ClassStyle {
        // Palette rotates with the seed so different seeds give different
        // montage content. Color contrast between classes falls off
        // quadratically as separation drops, leaving frequency and
        // orientation as the only reliable cues on hard settings.
        let offset = (self.seed % 360) as f32 / 360.0;
        let hue = (class as f32 / self.classes as f32 + offset) % 1.0;
        let saturation = 0.8 * (self.separation * self.separation) as f32;
        let (r, g, b) = hsv_to_rgb(hue, saturation, 0.6);
        ClassStyle {
            base: [r, g, b],
            freq: 1.5 + class as f32 * 0.9,
            orient: class as f32 * 2.39996 + 0.4,
        }
    }

    fn render(
        &self,
        style: &ClassStyle,
        size: usize,
        phase: f32,
        brightness: f32,
        noise_amp: f32,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Vec<f32> {
        let mut out = vec![0.0f32; 3 * size * size];
        let (sin_o, cos_o) = style.orient.sin_cos();
        let tau = std::f32::consts::TAU;
        for y in 0..size {
            for x in 0..size {
                let u = x as f32 / size as f32;
                let v = y as f32 / size as f32;
                let wave = (tau * style.freq * (u * cos_o + v * sin_o) + phase).sin();
                let noise = if noise_amp > 0.0 {
                    rng.random_range(-noise_amp..noise_amp)
                } else {
                    0.0
                };
                for c in 0..3 {
                    let val = style.base[c] + 0.22 * wave + brightness + noise;
                    out[c * size * size + y * size + x] = val.clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    /// Generates `per_class` images per class; `tag` separates independent
    /// splits (train/test) drawn over the same class styles.
    pub fn dataset(&self, per_class: usize, tag: u64) -> Result<LabelledDataset> {
        self.validate()?;
        let s = self.image_size;
        let noise_amp = (0.28 * (1.0 - self.separation) + 0.02) as f32;
        let mut data = Vec::with_capacity(self.classes * per_class * 3 * s * s);
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for class in 0..self.classes {
            let style = self.style(class);
            for i in 0..per_class {
                let mut rng = stream(
                    self.seed,
                    Purpose::Synth,
                    &[tag, (class * per_class + i) as u64],
                );
                let phase = rng.random_range(0.0..std::f32::consts::TAU);
                let brightness = rng.random_range(-0.04..0.04);
                data.extend(self.render(&style, s, phase, brightness, noise_amp, &mut rng));
                labels.push(class);
            }
        }
        LabelledDataset::new(
            Tensor::new(vec![self.classes * per_class, 3, s, s], data)?,
            labels,
            self.classes,
            format!("synth{}x{}c{}", s, s, self.classes),
        )
    }

    /// Single montage image tiling one exemplar tile per class at
    /// `tile_size` pixels; the domain-matched source for patch generation.
    pub fn montage(&self, tile_size: usize) -> Result<SourceImage> {
        self.validate()?;
        let grid = (self.classes as f64).sqrt().ceil() as usize;
        let side = grid * tile_size;
        let mut pixels = vec![0u8; side * side * 3];
        for class in 0..self.classes {
            let style = self.style(class);
            let mut rng = stream(self.seed, Purpose::Synth, &[u64::MAX, class as u64]);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let tile = self.render(&style, tile_size, phase, 0.0, 0.01, &mut rng);
            let (gy, gx) = (class / grid, class % grid);
            for y in 0..tile_size {
                for x in 0..tile_size {
                    for c in 0..3 {
                        let v = tile[c * tile_size * tile_size + y * tile_size + x];
                        let px = ((gy * tile_size + y) * side + gx * tile_size + x) * 3 + c;
                        pixels[px] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
        SourceImage::new(side, side, 3, pixels)
    }
}

/// Spec-level convenience: dataset plus its montage in one call.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    image_size: usize,
    separation: f64,
    seed: u64,
) -> Result<(LabelledDataset, SourceImage)> {
    let spec = SynthSpec {
        classes,
        image_size,
        separation,
        seed,
    };
    let ds = spec.dataset(per_class, 0)?;
    let montage = spec.montage((image_size * 4).max(32))?;
    Ok((ds, montage))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h * 6.0) % 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Loads `images/*.png` + `labels.csv` (`filename,label` rows). All images
/// must share one shape; labels are compacted to `0..N`.
pub fn load_png_dir(dir: &std::path::Path) -> Result<LabelledDataset> {
    let labels_path = dir.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(&labels_path)
        .map_err(|e| Error::Format(format!("labels.csv: {e}")))?;
    let mut entries: Vec<(String, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("labels.csv: {e}")))?;
        if record.len() < 2 {
            return Err(Error::Format("labels.csv rows need filename,label".into()));
        }
        let label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad label '{}'", &record[1])))?;
        entries.push((record[0].trim().to_string(), label));
    }
    if entries.is_empty() {
        return Err(Error::EmptyData("labels.csv has no rows".into()));
    }
    entries.sort();
    let num_classes = entries.iter().map(|&(_, l)| l).max().unwrap() + 1;

    let mut data: Vec<f32> = Vec::new();
    let mut labels = Vec::with_capacity(entries.len());
    let mut shape: Option<(usize, usize, usize)> = None;
    for (file, label) in &entries {
        let img = SourceImage::from_png(&dir.join("images").join(file))?;
        let this = (img.channels, img.height, img.width);
        match shape {
            None => shape = Some(this),
            Some(s) if s == this => {}
            Some(s) => {
                return Err(Error::Format(format!(
                    "image {file} has shape {this:?}, expected {s:?}"
                )))
            }
        }
        // Interleaved u8 -> channel-major f32.
        let (c, h, w) = this;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.pixels[(y * w + x) * c + ch] as f32 / 255.0);
                }
            }
        }
        labels.push(*label);
    }
    let (c, h, w) = shape.unwrap();
    LabelledDataset::new(
        Tensor::new(vec![entries.len(), c, h, w], data)?,
        labels,
        num_classes,
        dir.display().to_string(),
    )
}

/// Mean per-client label entropy (nats); the heterogeneity metric used by
/// the alpha-trend checks.
pub fn mean_client_label_entropy(partition: &Partition, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for client in &partition.client_indices {
        let mut counts = std::collections::BTreeMap::new();
        for &i in client {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        let n = client.len() as f64;
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        total += h;
    }
    total / partition.num_clients() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(3, 10);
        let p = dirichlet_partition(&labels, 1, 0.5, 3).unwrap();
        assert_eq!(p.client_indices[0], (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_disjoint_and_covers() {
        let labels = balanced_labels(4, 25);
        let p = dirichlet_partition(&labels, 7, 0.3, 11).unwrap();
        let mut seen = vec![false; labels.len()];
        for client in &p.client_indices {
            assert!(!client.is_empty());
            for &i in client {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn partition_is_deterministic() {
        let labels = balanced_labels(5, 20);
        let a = dirichlet_partition(&labels, 6, 1.0, 2).unwrap();
        let b = dirichlet_partition(&labels, 6, 1.0, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_alpha_is_nearly_uniform() {
        // Every client's per-class share within +-50% of uniform across seeds.
        let labels = balanced_labels(10, 100);
        for seed in 0..5 {
            let p = dirichlet_partition(&labels, 10, 100.0, seed).unwrap();
            for client in &p.client_indices {
                let mut per_class = vec![0usize; 10];
                for &i in client {
                    per_class[labels[i]] += 1;
                }
                for &c in &per_class {
                    assert!((5..=15).contains(&c), "count {c} outside +-50% of 10");
                }
            }
        }
    }

    #[test]
    fn low_alpha_is_more_heterogeneous() {
        let labels = balanced_labels(10, 100);
        let mut low = 0.0;
        let mut high = 0.0;
        for seed in 0..5 {
            let pl = dirichlet_partition(&labels, 10, 0.1, seed).unwrap();
            let ph = dirichlet_partition(&labels, 10, 100.0, seed).unwrap();
            low += mean_client_label_entropy(&pl, &labels);
            high += mean_client_label_entropy(&ph, &labels);
        }
        assert!(
            low / 5.0 < high / 5.0,
            "alpha 0.1 entropy {low} not below alpha 100 entropy {high}"
        );
    }

    #[test]
    fn too_many_clients_errors() {
        let labels = vec![0, 1, 0];
        assert!(matches!(
            dirichlet_partition(&labels, 4, 1.0, 0),
            Err(Error::TooManyClients { .. })
        ));
    }

    #[test]
    fn holdout_sizes_and_stratification() {
        let spec = SynthSpec {
            classes: 4,
            image_size: 8,
            separation: 0.9,
            seed: 5,
        };
        let ds = spec.dataset(250, 0).unwrap();
        assert_eq!(ds.len(), 1000);
        let (train, val) = holdout_split(&ds, 0.1, 9).unwrap();
        assert_eq!(val.len(), 100);
        assert_eq!(train.len(), 900);
        for c in 0..4 {
            let vc = val.labels.iter().filter(|&&l| l == c).count() as i64;
            assert!((vc - 25).abs() <= 1, "class {c} got {vc} validation items");
        }
        // Same seed, same split.
        let (train2, val2) = holdout_split(&ds, 0.1, 9).unwrap();
        assert_eq!(train.labels, train2.labels);
        assert_eq!(val.inputs, val2.inputs);
    }

    #[test]
    fn holdout_rejects_bad_fraction() {
        let spec = SynthSpec {
            classes: 2,
            image_size: 8,
            separation: 0.9,
            seed: 5,
        };
        let ds = spec.dataset(5, 0).unwrap();
        assert!(holdout_split(&ds, 0.0, 1).is_err());
        assert!(holdout_split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let (a, ma) = synth_dataset(3, 4, 8, 0.9, 7).unwrap();
        let (b, mb) = synth_dataset(3, 4, 8, 0.9, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.digest(), mb.digest());
        let (_, mc) = synth_dataset(3, 4, 8, 0.9, 8).unwrap();
        assert_ne!(ma.digest(), mc.digest());
    }

    #[test]
    fn high_separation_is_nearest_centroid_separable() {
        let (ds, _) = synth_dataset(4, 40, 12, 0.95, 3).unwrap();
        // Per-class raw-pixel centroids.
        let dim = ds.inputs.row_len();
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = [0usize; 4];
        for i in 0..ds.len() {
            let c = ds.labels[i];
            counts[c] += 1;
            for (a, &v) in centroids[c].iter_mut().zip(ds.inputs.row(i)) {
                *a += v as f64;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            for v in centroid.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut hits = 0;
        for i in 0..ds.len() {
            let row = ds.inputs.row(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(&centroids[a])
                        .map(|(&v, &c)| (v as f64 - c).powi(2))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(&centroids[b])
                        .map(|(&v, &c)| (v as f64 - c).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.labels[i] {
                hits += 1;
            }
        }
        assert!(
            hits as f64 / ds.len() as f64 >= 0.99,
            "nearest-centroid accuracy {hits}/{}",
            ds.len()
        );
    }

    #[test]
    fn png_dir_round_trip() {
        let spec = SynthSpec {
            classes: 2,
            image_size: 8,
            separation: 0.9,
            seed: 1,
        };
        let ds = spec.dataset(3, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        let mut csv = String::new();
        for i in 0..ds.len() {
            // Channel-major f32 back to interleaved u8.
            let row = ds.inputs.row(i);
            let s = 8;
            let mut pixels = vec![0u8; s * s * 3];
            for c in 0..3 {
                for p in 0..s * s {
                    pixels[p * 3 + c] = (row[c * s * s + p] * 255.0).round() as u8;
                }
            }
            let img = SourceImage::new(s, s, 3, pixels).unwrap();
            let name = format!("img{i:02}.png");
            img.to_png(&dir.path().join("images").join(&name)).unwrap();
            csv.push_str(&format!("{name},{}\n", ds.labels[i]));
        }
        std::fs::write(dir.path().join("labels.csv"), csv).unwrap();
        let loaded = load_png_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.num_classes, 2);
        // Quantization to u8 and back stays within 1/255.
        for i in 0..ds.len() {
            for (a, b) in loaded.inputs.row(i).iter().zip(ds.inputs.row(i)) {
                assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
