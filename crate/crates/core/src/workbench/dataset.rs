//! On-disk multi-view dataset: a JSON manifest plus per-view PNG color, 1-bit
//! PNG mask and raw 32-bit depth files, each recorded with its SHA-256.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/scenes/<scene>/<view>_rgb.png
//! <dir>/scenes/<scene>/<view>_mask.png
//! <dir>/scenes/<scene>/<view>_depth.bin
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::fitting::FitTarget;
use crate::rng::{derive, label, stream};
use crate::scene::{make_hull_masks, random_caption, render_oracle_view, Caption, SceneSpec, Sizing, ViewRecord};
use crate::workbench::io::{read_file, write_file};

pub const DATASET_FORMAT: &str = "tpdiff-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 4] = b"TPDD";
pub const DEPTH_VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    /// How many of each scene's views are reserved for evaluation (the last ones).
    pub heldout_views: usize,
    pub resolution: usize,
    /// Probability that a scene holds a single primitive rather than a stack.
    pub p_single: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_scenes: 200, views_per_scene: 64, heldout_views: 4, resolution: 128, p_single: 0.5, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what, detail: String| Err(Error::OutOfRange { what, detail });
        if self.n_scenes == 0 {
            return bad("scene count", "0".into());
        }
        if self.heldout_views >= self.views_per_scene {
            return bad("held-out views", format!("{} of {} views", self.heldout_views, self.views_per_scene));
        }
        if self.resolution == 0 {
            return bad("image resolution", "0".into());
        }
        if !(0.0..=1.0).contains(&self.p_single) {
            return bad("single-object probability", self.p_single.to_string());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera: CameraPose,
    pub heldout: bool,
    pub rgb: String,
    pub mask: String,
    pub depth: String,
    pub rgb_sha256: String,
    pub mask_sha256: String,
    pub depth_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub caption: Caption,
    pub spec: SceneSpec,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn num_views(&self) -> usize {
        self.scenes.iter().map(|s| s.views.len()).sum()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_rgb_png(rgb: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    let data: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_png(&data, height, width, png::ColorType::Rgb, png::BitDepth::Eight)
}

/// One bit per pixel, rows padded to whole bytes, most significant bit first.
pub fn encode_mask_png(mask: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    let stride = width.div_ceil(8);
    let mut data = vec![0u8; stride * height];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        let (r, c) = (i / width, i % width);
        data[r * stride + c / 8] |= 0x80 >> (c % 8);
    }
    encode_png(&data, height, width, png::ColorType::Grayscale, png::BitDepth::One)
}

fn encode_png(data: &[u8], height: usize, width: usize, color: png::ColorType, depth: png::BitDepth) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_image_data(data).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(out)
}

/// Decodes a PNG without transformations: `(raw rows, height, width, color, depth)`.
fn decode_png(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize, png::ColorType, png::BitDepth)> {
    let err = |e: png::DecodingError| Error::Format { kind: "png", path: path.to_path_buf(), detail: e.to_string() };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize, info.color_type, info.bit_depth))
}

pub fn decode_rgb_png(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let (data, h, w, color, depth) = decode_png(bytes, path)?;
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(Error::Format { kind: "png", path: path.to_path_buf(), detail: format!("expected 8-bit RGB, got {color:?} {depth:?}") });
    }
    Ok((data.iter().map(|&v| v as f32 / 255.0).collect(), h, w))
}

pub fn decode_mask_png(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let (data, h, w, color, depth) = decode_png(bytes, path)?;
    if color != png::ColorType::Grayscale || depth != png::BitDepth::One {
        return Err(Error::Format { kind: "png", path: path.to_path_buf(), detail: format!("expected 1-bit gray, got {color:?} {depth:?}") });
    }
    let stride = w.div_ceil(8);
    let mask = (0..h * w).map(|i| (data[(i / w) * stride + (i % w) / 8] >> (7 - (i % w) % 8)) & 1).collect();
    Ok((mask, h, w))
}

/// `TPDD`, version u16, height u32, width u32, then `height · width`
/// little-endian f32 distances (`+∞` off the object).
pub fn encode_depth(depth: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + depth.len() * 4);
    out.extend(DEPTH_MAGIC);
    out.extend(DEPTH_VERSION.to_le_bytes());
    out.extend((height as u32).to_le_bytes());
    out.extend((width as u32).to_le_bytes());
    for d in depth {
        out.extend(d.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let err = |detail: String| Error::Format { kind: "depth", path: path.to_path_buf(), detail };
    if bytes.len() < 14 || &bytes[..4] != DEPTH_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DEPTH_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[14..];
    if payload.len() != h * w * 4 {
        return Err(err(format!("payload is {} bytes, header implies {}", payload.len(), h * w * 4)));
    }
    Ok((payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(), h, w))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".tpdiff.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| Error::DatasetWrite { path: dir.to_path_buf(), source })?;
        let path = dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(source) => Err(Error::DatasetWrite { path, source }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// The scene of index `i`: its caption, primitive sizes and views all come
/// from streams keyed by `(seed, i)`.
pub fn scene_for_index(cfg: &DatasetConfig, i: usize) -> Result<SceneSpec> {
    let mut rng = stream(cfg.seed, &[label::SCENE, i as u64]);
    let caption = random_caption(&mut rng, cfg.p_single);
    SceneSpec::for_caption(&caption, Sizing::Random(&mut rng), derive(cfg.seed, &[label::SCENE, i as u64]))
}

pub fn camera_for_view(cfg: &DatasetConfig, scene: usize, view: usize) -> CameraPose {
    CameraPose::sample(&mut stream(cfg.seed, &[label::CAMERA, scene as u64, view as u64]))
}

/// Renders and writes a dataset. Output bytes depend only on `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(dir)?;
    let scenes = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let spec = scene_for_index(cfg, i)?;
            let rel_dir = format!("scenes/{i:05}");
            let abs_dir = dir.join(&rel_dir);
            fs::create_dir_all(&abs_dir).map_err(|source| Error::DatasetWrite { path: abs_dir.clone(), source })?;
            let views = (0..cfg.views_per_scene)
                .map(|v| {
                    let camera = camera_for_view(cfg, i, v);
                    let rec = render_oracle_view(&spec, &camera, cfg.resolution, cfg.resolution)?;
                    write_view(dir, &rel_dir, v, &rec, v >= cfg.views_per_scene - cfg.heldout_views)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneEntry { index: i, caption: spec.caption.clone(), spec, views })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { format: DATASET_FORMAT.into(), version: DATASET_VERSION, config: cfg.clone(), scenes };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    write_file(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

fn write_view(root: &Path, rel_dir: &str, v: usize, rec: &ViewRecord, heldout: bool) -> Result<ViewEntry> {
    let files = [
        (format!("{rel_dir}/{v:03}_rgb.png"), encode_rgb_png(&rec.rgb, rec.height, rec.width)?),
        (format!("{rel_dir}/{v:03}_mask.png"), encode_mask_png(&rec.mask, rec.height, rec.width)?),
        (format!("{rel_dir}/{v:03}_depth.bin"), encode_depth(&rec.depth, rec.height, rec.width)),
    ];
    for (rel, bytes) in &files {
        write_file(&root.join(rel), bytes)?;
    }
    let [(rgb, a), (mask, b), (depth, c)] = files;
    Ok(ViewEntry {
        camera: rec.camera,
        heldout,
        rgb,
        mask,
        depth,
        rgb_sha256: sha256_hex(&a),
        mask_sha256: sha256_hex(&b),
        depth_sha256: sha256_hex(&c),
    })
}

/// A dataset opened for reading; every file is checked against its recorded
/// digest as it is loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// One scene's views split into training and evaluation sets.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub spec: SceneSpec,
    pub train: Vec<ViewRecord>,
    pub heldout: Vec<ViewRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format { kind: "manifest", path: path.clone(), detail: e.to_string() })?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::Format {
                kind: "manifest",
                path,
                detail: format!("unsupported format {} v{}", manifest.format, manifest.version),
            });
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    fn read_checked(&self, rel: &str, sha: &str) -> Result<(Vec<u8>, PathBuf)> {
        let path = self.root.join(rel);
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != sha {
            return Err(Error::Format { kind: "dataset", path, detail: "checksum mismatch".into() });
        }
        Ok((bytes, path))
    }

    pub fn load_view(&self, entry: &ViewEntry) -> Result<ViewRecord> {
        let (bytes, path) = self.read_checked(&entry.rgb, &entry.rgb_sha256)?;
        let (rgb, height, width) = decode_rgb_png(&bytes, &path)?;
        let (bytes, path) = self.read_checked(&entry.mask, &entry.mask_sha256)?;
        let (mask, mh, mw) = decode_mask_png(&bytes, &path)?;
        let (bytes, path) = self.read_checked(&entry.depth, &entry.depth_sha256)?;
        let (depth, dh, dw) = decode_depth(&bytes, &path)?;
        if (mh, mw) != (height, width) || (dh, dw) != (height, width) {
            return Err(Error::Format { kind: "dataset", path, detail: "image sizes disagree".into() });
        }
        Ok(ViewRecord { camera: entry.camera, height, width, rgb, mask, depth })
    }

    pub fn load_scene(&self, index: usize) -> Result<LoadedScene> {
        let entry = self.manifest.scenes.get(index).ok_or_else(|| Error::OutOfRange {
            what: "scene index",
            detail: format!("{index} of {}", self.manifest.scenes.len()),
        })?;
        let mut scene = LoadedScene { spec: entry.spec.clone(), train: Vec::new(), heldout: Vec::new() };
        for v in &entry.views {
            let rec = self.load_view(v)?;
            if v.heldout {
                scene.heldout.push(rec);
            } else {
                scene.train.push(rec);
            }
        }
        Ok(scene)
    }

    /// Fitting supervision for a scene, with hull masks at the triplane resolution.
    pub fn fit_target(&self, index: usize, triplane_resolution: usize, dilation: usize) -> Result<FitTarget> {
        let s = self.load_scene(index)?;
        let hull = make_hull_masks(&s.spec, triplane_resolution, dilation);
        FitTarget::new(s.train, s.heldout, hull)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { n_scenes: 3, views_per_scene: 4, heldout_views: 1, resolution: 13, p_single: 0.5, seed: 7 }
    }

    fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_byte_identical_and_roundtrips() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&small(), a.path()).unwrap();
        rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| generate_dataset(&small(), b.path())).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        assert_eq!((m.scenes.len(), m.num_views()), (3, 12));
        assert!(!a.path().join(OutputLock::FILE).exists());

        let ds = Dataset::open(a.path()).unwrap();
        let s = ds.load_scene(1).unwrap();
        assert_eq!((s.train.len(), s.heldout.len()), (3, 1));
        let spec = scene_for_index(&small(), 1).unwrap();
        let direct = render_oracle_view(&spec, &camera_for_view(&small(), 1, 3), 13, 13).unwrap();
        assert_eq!(s.heldout[0], direct);
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), dir.path()).unwrap();
        let rel = &m.scenes[0].views[0].depth;
        let mut bytes = fs::read(dir.path().join(rel)).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(dir.path().join(rel), bytes).unwrap();
        assert!(Dataset::open(dir.path()).unwrap().load_scene(0).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let held = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(generate_dataset(&small(), dir.path()), Err(Error::Locked(_))));
        drop(held);
        assert!(generate_dataset(&small(), dir.path()).is_ok());
    }

    #[test]
    fn counting_example() {
        let cfg = DatasetConfig { n_scenes: 200, views_per_scene: 64, ..DatasetConfig::default() };
        let captions: Vec<Caption> = (0..cfg.n_scenes).map(|i| scene_for_index(&cfg, i).unwrap().caption).collect();
        assert_eq!(captions.len() * cfg.views_per_scene, 12800);
        let singles: std::collections::BTreeSet<String> =
            captions.iter().filter(|c| c.num_objects() == 1).map(|c| c.to_string()).collect();
        assert!(singles.len() <= 20);
    }

    #[test]
    fn mask_png_handles_ragged_rows() {
        let mask: Vec<u8> = (0..13 * 3).map(|i| (i % 3 == 0) as u8).collect();
        let bytes = encode_mask_png(&mask, 3, 13).unwrap();
        assert_eq!(decode_mask_png(&bytes, Path::new("m")).unwrap(), (mask, 3, 13));
        let depth = vec![1.5f32, f32::INFINITY, 0.25, 2.0];
        assert_eq!(decode_depth(&encode_depth(&depth, 2, 2), Path::new("d")).unwrap(), (depth, 2, 2));
        assert!(decode_depth(&encode_depth(&[1.0], 2, 2), Path::new("d")).is_err());
    }
}
