//! Person-image records: a procedural multi-camera generator, a directory
//! loader for `<identity>_c<camera>_<rest>` files, and the training sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Synthetic { seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonImageRecord {
    pub identity: u32,
    pub camera: u32,
    pub image: ImageBuffer,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitKind {
    Train,
    Query,
    Gallery,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Query, SplitKind::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Query => "query",
            SplitKind::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PersonImageRecord>,
    pub query: Vec<PersonImageRecord>,
    pub gallery: Vec<PersonImageRecord>,
}

impl DatasetSplit {
    pub fn get(&self, kind: SplitKind) -> &[PersonImageRecord] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Query => &self.query,
            SplitKind::Gallery => &self.gallery,
        }
    }

    fn get_mut(&mut self, kind: SplitKind) -> &mut Vec<PersonImageRecord> {
        match kind {
            SplitKind::Train => &mut self.train,
            SplitKind::Query => &mut self.query,
            SplitKind::Gallery => &mut self.gallery,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query identities with no gallery image from another camera.
    pub fn unanswerable_query_identities(&self) -> Vec<u32> {
        let mut bad = BTreeSet::new();
        for q in &self.query {
            let ok = self
                .gallery
                .iter()
                .any(|g| g.identity == q.identity && g.camera != q.camera);
            if !ok {
                bad.insert(q.identity);
            }
        }
        bad.into_iter().collect()
    }

    pub fn warn_if_ill_posed(&self) {
        let bad = self.unanswerable_query_identities();
        if !bad.is_empty() {
            log::warn!(
                "{} query identities have no cross-camera gallery match: {bad:?}",
                bad.len()
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_id: usize,
    pub cameras: usize,
    pub images_per_id_per_camera: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Share of each (identity, camera) group used for training; the rest goes
    /// to the query set for camera 1 and to the gallery otherwise.
    pub train_fraction: f64,
    pub camera_shift: f64,
    pub illumination: f64,
    pub pose_jitter: f64,
    pub clutter: f64,
    pub occlusion: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_id: 8,
            cameras: 2,
            images_per_id_per_camera: 10,
            height: 64,
            width: 32,
            seed: 0,
            train_fraction: 0.5,
            camera_shift: 0.3,
            illumination: 0.3,
            pose_jitter: 0.5,
            clutter: 0.2,
            occlusion: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn train_per_group(&self) -> usize {
        (self.images_per_id_per_camera as f64 * self.train_fraction).round() as usize
    }

    pub fn total_records(&self) -> usize {
        self.n_id * self.cameras * self.images_per_id_per_camera
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cameras < 2 {
            return bad(format!(
                "cross-camera evaluation needs at least 2 cameras, got {}",
                self.cameras
            ));
        }
        if self.n_id == 0 || self.images_per_id_per_camera == 0 {
            return bad("n_id and images_per_id_per_camera must be positive".into());
        }
        if self.height < 8 || self.width < 4 {
            return bad(format!("base resolution {}x{} is too small", self.height, self.width));
        }
        let strengths = [
            ("camera_shift", self.camera_shift),
            ("illumination", self.illumination),
            ("pose_jitter", self.pose_jitter),
            ("clutter", self.clutter),
            ("occlusion", self.occlusion),
            ("train_fraction", self.train_fraction),
        ];
        if let Some((name, v)) = strengths.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return bad(format!("{name} = {v} is outside [0, 1]"));
        }
        let t = self.train_per_group();
        if t == 0 || t >= self.images_per_id_per_camera {
            return bad(format!(
                "train_fraction {} leaves {t} of {} images per group for training",
                self.train_fraction, self.images_per_id_per_camera
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Appearance {
    hair: [f32; 3],
    torso: [f32; 3],
    legs: [f32; 3],
    stripe: [f32; 3],
    stripe_period: usize,
    stripe_vertical: bool,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

impl Appearance {
    /// Torso and leg hues are spread evenly around the color wheel (legs in a
    /// shuffled order) so that identities differ in at least one large region.
    fn draw(rng: &mut Rng, torso_slot: usize, leg_slot: usize, n: usize) -> Self {
        let slot_hue = |slot: usize, rng: &mut Rng| (slot as f64 + rng.uniform_range(-0.2, 0.2)) / n as f64;
        let torso_hue = slot_hue(torso_slot, rng);
        let leg_hue = slot_hue(leg_slot, rng);
        let mut sv = || (rng.uniform_range(0.5, 0.9), rng.uniform_range(0.45, 0.95));
        let (ts, tv) = sv();
        let (ls, lv) = sv();
        let (ss, sv2) = sv();
        let (hs, hv) = sv();
        Appearance {
            hair: hsv(rng.uniform(), hs, hv * 0.6),
            torso: hsv(torso_hue, ts, tv),
            legs: hsv(leg_hue, ls, lv),
            stripe: hsv(torso_hue + rng.uniform_range(0.25, 0.75), ss, sv2),
            stripe_period: rng.int_inclusive(3, 7),
            stripe_vertical: rng.bernoulli(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CameraModel {
    gain: [f32; 3],
    gamma: f32,
    background: [f32; 3],
    vertical_offset: f64,
    scale: f64,
}

impl CameraModel {
    fn draw(rng: &mut Rng, strength: f64) -> Self {
        let mut u = |a: f64| rng.uniform_range(-a, a);
        CameraModel {
            gain: [0, 1, 2].map(|_| (1.0 + strength * u(0.3)) as f32),
            gamma: (strength * u(0.4)).exp() as f32,
            background: [0, 1, 2].map(|_| (0.5 + strength * u(0.3)) as f32),
            vertical_offset: strength * u(0.06),
            scale: 1.0 + strength * u(0.1),
        }
    }

    fn apply(&self, v: f32, c: usize) -> f32 {
        (v * self.gain[c]).clamp(0.0, 1.0).powf(self.gamma)
    }
}

fn fill_rect(img: &mut ImageBuffer, y0: f64, y1: f64, x0: f64, x1: f64, mut color: impl FnMut(usize, usize) -> [f32; 3]) {
    let (h, w) = img.dims();
    let ys = (y0.round().max(0.0) as usize)..(y1.round().min(h as f64).max(0.0) as usize);
    let xs = (x0.round().max(0.0) as usize)..(x1.round().min(w as f64).max(0.0) as usize);
    for y in ys {
        for x in xs.clone() {
            img.set_pixel(y, x, color(y, x));
        }
    }
}

fn render(cfg: &SynthConfig, person: &Appearance, cam: &CameraModel, rng: &mut Rng) -> ImageBuffer {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut img = ImageBuffer::filled(h, w, cam.background);

    if cfg.clutter > 0.0 {
        let blobs = rng.int_inclusive(1, 4);
        for _ in 0..blobs {
            let color = [0, 1, 2].map(|_| rng.uniform() as f32);
            let mix = cfg.clutter as f32;
            let (cy, cx) = (rng.uniform() * hf, rng.uniform() * wf);
            let (rh, rw) = (rng.uniform_range(0.1, 0.4) * hf, rng.uniform_range(0.2, 0.6) * wf);
            let bg = cam.background;
            fill_rect(&mut img, cy - rh / 2.0, cy + rh / 2.0, cx - rw / 2.0, cx + rw / 2.0, |_, _| {
                [0, 1, 2].map(|c| bg[c] * (1.0 - mix) + color[c] * mix)
            });
        }
        let amp = 0.15 * cfg.clutter;
        for v in img.data_mut() {
            *v = (*v + rng.uniform_range(-amp, amp) as f32).clamp(0.0, 1.0);
        }
    }

    let j = cfg.pose_jitter;
    let dx = rng.uniform_range(-0.12, 0.12) * j * wf;
    let dy = rng.uniform_range(-0.05, 0.05) * j * hf;
    let body_w = (1.0 + rng.uniform_range(-0.15, 0.15) * j) * 0.5 * wf * cam.scale;
    let stride = rng.uniform_range(0.0, 0.25) * j * body_w;
    let top = hf * (0.08 + cam.vertical_offset) + dy;
    let span = hf * 0.86 * cam.scale;
    let cx = wf / 2.0 + dx;

    let head_h = 0.16 * span;
    let torso_h = 0.38 * span;
    let legs_h = span - head_h - torso_h;
    fill_rect(&mut img, top, top + head_h, cx - 0.22 * body_w, cx + 0.22 * body_w, |_, _| person.hair);
    fill_rect(&mut img, top + 0.55 * head_h, top + head_h, cx - 0.18 * body_w, cx + 0.18 * body_w, |_, _| {
        [0.85, 0.7, 0.55]
    });
    let t0 = top + head_h;
    let p = person.stripe_period;
    fill_rect(&mut img, t0, t0 + torso_h, cx - body_w / 2.0, cx + body_w / 2.0, |y, x| {
        let k = if person.stripe_vertical { x } else { y };
        if (k / p).is_multiple_of(2) {
            person.torso
        } else {
            person.stripe
        }
    });
    let l0 = t0 + torso_h;
    let leg_w = 0.42 * body_w;
    let gap = 0.04 * body_w + stride;
    fill_rect(&mut img, l0, l0 + legs_h, cx - gap / 2.0 - leg_w, cx - gap / 2.0, |_, _| person.legs);
    fill_rect(&mut img, l0, l0 + legs_h, cx + gap / 2.0, cx + gap / 2.0 + leg_w, |_, _| person.legs);

    if cfg.occlusion > 0.0 && rng.bernoulli(cfg.occlusion) {
        let color = [0, 1, 2].map(|_| rng.uniform() as f32);
        let oh = rng.uniform_range(0.15, 0.35) * hf;
        let ow = rng.uniform_range(0.4, 1.0) * wf;
        let oy = rng.uniform_range(0.3 * hf, hf - oh);
        let ox = rng.uniform_range(0.0, wf - ow);
        fill_rect(&mut img, oy, oy + oh, ox, ox + ow, |_, _| color);
    }

    let light = (1.0 + rng.uniform_range(-0.3, 0.3) * cfg.illumination) as f32;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (img.get(c, y, x) * light).clamp(0.0, 1.0);
                img.set(c, y, x, cam.apply(v, c));
            }
        }
    }
    img
}

/// Procedural multi-camera dataset, fully determined by `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut torso_slots: Vec<usize> = (0..cfg.n_id).collect();
    let mut leg_slots = torso_slots.clone();
    let mut slot_rng = root.split("palette");
    slot_rng.shuffle(&mut torso_slots);
    slot_rng.shuffle(&mut leg_slots);
    let people: Vec<Appearance> = (0..cfg.n_id)
        .map(|i| {
            let mut rng = root.split_indexed("identity", i as u64);
            Appearance::draw(&mut rng, torso_slots[i], leg_slots[i], cfg.n_id)
        })
        .collect();
    let cams: Vec<CameraModel> = (0..cfg.cameras)
        .map(|c| CameraModel::draw(&mut root.split_indexed("camera", c as u64), cfg.camera_shift))
        .collect();
    let n_train = cfg.train_per_group();
    let mut split = DatasetSplit::default();
    let mut index = 0u64;
    for (i, person) in people.iter().enumerate() {
        for (c, cam) in cams.iter().enumerate() {
            for k in 0..cfg.images_per_id_per_camera {
                let mut rng = root.split_indexed("image", index);
                let record = PersonImageRecord {
                    identity: i as u32 + 1,
                    camera: c as u32 + 1,
                    image: render(cfg, person, cam, &mut rng),
                    source: Source::Synthetic { seed: rng.seed() },
                };
                index += 1;
                let kind = if k < n_train {
                    SplitKind::Train
                } else if c == 0 {
                    SplitKind::Query
                } else {
                    SplitKind::Gallery
                };
                split.get_mut(kind).push(record);
            }
        }
    }
    Ok(split)
}

/// Parses `<identity>_c<camera>...`; identity and camera must be positive.
pub fn parse_filename(name: &str) -> Option<(u32, u32)> {
    let (id, rest) = name.split_once('_')?;
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let rest = rest.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    let identity: u32 = id.parse().ok()?;
    let camera: u32 = digits.parse().ok()?;
    (identity > 0 && camera > 0).then_some((identity, camera))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Loads the image files of one directory in file-name order.
pub fn load_records(dir: &Path) -> Result<Vec<PersonImageRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Load {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match parse_filename(name) {
            Some((identity, camera)) => records.push(PersonImageRecord {
                identity,
                camera,
                image: ImageBuffer::load(&path)?,
                source: Source::File(path),
            }),
            None => log::warn!("skipping {}: name does not match <id>_c<camera>_...", path.display()),
        }
    }
    Ok(records)
}

/// Reads `root/{train,query,gallery}`; every split must contain at least one image.
pub fn load_directory(root: &Path) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for kind in SplitKind::ALL {
        let dir = root.join(kind.dir_name());
        let records = load_records(&dir)?;
        if records.is_empty() {
            return Err(Error::Load {
                path: dir,
                reason: "no usable images".into(),
            });
        }
        *split.get_mut(kind) = records;
    }
    split.warn_if_ill_posed();
    Ok(split)
}

/// Writes `split` as PNGs in the layout [`load_directory`] reads.
pub fn export(split: &DatasetSplit, root: &Path) -> Result<()> {
    let mut index = 0usize;
    for kind in SplitKind::ALL {
        let dir = root.join(kind.dir_name());
        fs::create_dir_all(&dir)?;
        for r in split.get(kind) {
            let name = format!("{:04}_c{}s1_{:06}.png", r.identity, r.camera, index);
            r.image.save(&dir.join(name))?;
            index += 1;
        }
    }
    Ok(())
}

/// Shuffled mini-batches over training records with contiguous class labels.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labels: Vec<usize>,
    identity_to_label: BTreeMap<u32, usize>,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(records: &[PersonImageRecord], batch_size: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let identity_to_label: BTreeMap<u32, usize> = records
            .iter()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let labels = records.iter().map(|r| identity_to_label[&r.identity]).collect();
        Ok(BatchSampler {
            labels,
            identity_to_label,
            batch_size,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.identity_to_label.len()
    }

    pub fn label_map(&self) -> &BTreeMap<u32, usize> {
        &self.identity_to_label
    }

    /// Class index of record `i`.
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.batch_size)
    }

    /// Record indices of every batch in one epoch; the last may be short.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        rng.shuffle(&mut order);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}
