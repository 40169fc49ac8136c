//! On-disk formats: binary Gaussian scene files, flat `key = value` text,
//! and the demonstration dataset layout
//!
//! ```text
//! <root>/demos/<id>/meta
//! <root>/demos/<id>/step_<k>/view_<v>.rgb.ppm
//! <root>/demos/<id>/step_<k>/view_<v>.depth.bin
//! <root>/demos/<id>/step_<k>/view_<v>.mask.pgm
//! <root>/demos/<id>/step_<k>/action.kv
//! ```
//!
//! The future frames of step `k` are the RGB views of step `k + 1`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{DepthImage, LabelImage, RgbImage};
use crate::types::{
    ArmAction, BimanualAction, DemoStep, DemoTrajectory, Gaussian, GaussianSet, Observation, Proprio, RoleAssignment,
    View, GAUSSIAN_FIELDS,
};

const SCENE_MAGIC: &[u8; 4] = b"BGS1";

pub fn scene_to_bytes(set: &GaussianSet) -> Result<Vec<u8>> {
    let n = u32::try_from(set.len()).map_err(|_| Error::Format("too many gaussians for a scene file".into()))?;
    let mut out = Vec::with_capacity(8 + set.len() * GAUSSIAN_FIELDS * 8);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    for g in &set.gaussians {
        for v in g.to_fields() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a scene file; the timestamp is not stored and reads back as 0.
pub fn scene_from_bytes(bytes: &[u8]) -> Result<GaussianSet> {
    if bytes.len() < 8 || &bytes[..4] != SCENE_MAGIC {
        return Err(Error::Format("missing BGS1 header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != n * GAUSSIAN_FIELDS * 8 {
        return Err(Error::Format(format!(
            "scene declares {n} gaussians but carries {} payload bytes",
            body.len()
        )));
    }
    let gaussians = body
        .chunks_exact(GAUSSIAN_FIELDS * 8)
        .map(|rec| {
            let mut f = [0.0; GAUSSIAN_FIELDS];
            for (k, c) in rec.chunks_exact(8).enumerate() {
                f[k] = f64::from_le_bytes(c.try_into().unwrap());
            }
            Gaussian::from_fields(&f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianSet::new(gaussians, 0))
}

pub fn write_scene(path: &Path, set: &GaussianSet) -> Result<()> {
    fs::write(path, scene_to_bytes(set)?).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<GaussianSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    scene_from_bytes(&bytes)
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(path, format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::parse(path, format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

pub fn write_kv(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, format_kv(map)).map_err(|e| Error::io(path, e))
}

/// Typed lookups on a parsed key/value map.
pub struct KvReader<'a> {
    pub map: &'a BTreeMap<String, String>,
    pub path: &'a Path,
}

impl KvReader<'_> {
    pub fn str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse(self.path, format!("missing key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.str(key)?;
        s.parse().map_err(|_| Error::parse(self.path, format!("bad value `{s}` for `{key}`")))
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let s = self.str(key)?;
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::parse(self.path, format!("bad list item `{p}` for `{key}`")))
            })
            .collect()
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn action_kv(action: &BimanualAction, proprio: &Proprio) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("role".into(), action.role.to_string());
    for (name, a) in [("left", action.left()), ("right", action.right())] {
        m.insert(format!("{name}.trans"), join(&a.trans_bin()));
        m.insert(format!("{name}.rot"), join(&a.rot_bins()));
        m.insert(format!("{name}.open"), (a.open() as u8).to_string());
        m.insert(format!("{name}.collide"), (a.collide() as u8).to_string());
    }
    m.insert("proprio.time".into(), proprio.time_index.to_string());
    m.insert("proprio.left_open".into(), (proprio.left_open as u8).to_string());
    m.insert("proprio.right_open".into(), (proprio.right_open as u8).to_string());
    m
}

fn parse_action(kv: &KvReader) -> Result<(BimanualAction, Proprio)> {
    // absent role falls back to the default (right arm stabilizes)
    let role = match kv.map.get("role") {
        Some(r) => r.parse()?,
        None => RoleAssignment::default(),
    };
    let flag = |k: &str| -> Result<bool> {
        match kv.parse::<u8>(k)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::parse(kv.path, format!("`{k}` must be 0 or 1, got {v}"))),
        }
    };
    let arm = |name: &str| -> Result<ArmAction> {
        let t: Vec<usize> = kv.list(&format!("{name}.trans"))?;
        let r: Vec<usize> = kv.list(&format!("{name}.rot"))?;
        let t: [usize; 3] = t.try_into().map_err(|_| Error::parse(kv.path, format!("{name}.trans needs 3 bins")))?;
        let r: [usize; 3] = r.try_into().map_err(|_| Error::parse(kv.path, format!("{name}.rot needs 3 bins")))?;
        ArmAction::new(t, r, flag(&format!("{name}.open"))?, flag(&format!("{name}.collide"))?)
    };
    let action = BimanualAction::from_arms(arm("left")?, arm("right")?, role);
    let proprio = Proprio {
        time_index: kv.parse("proprio.time")?,
        left_open: flag("proprio.left_open")?,
        right_open: flag("proprio.right_open")?,
    };
    Ok((action, proprio))
}

fn step_dir(demo: &Path, k: usize) -> PathBuf {
    demo.join(format!("step_{k}"))
}

/// Writes one trajectory into `dir` (created if needed).
pub fn write_demo(dir: &Path, demo: &DemoTrajectory, extra_meta: &BTreeMap<String, String>) -> Result<()> {
    demo.validate()?;
    let first = demo
        .steps
        .first()
        .ok_or_else(|| Error::invalid("demo", "trajectory has no steps"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = extra_meta.clone();
    meta.insert("language".into(), demo.language.clone());
    meta.insert("steps".into(), demo.steps.len().to_string());
    meta.insert("views".into(), first.observation.views.len().to_string());
    meta.insert("background".into(), "black".into());
    for (v, view) in first.observation.views.iter().enumerate() {
        meta.insert(format!("camera.{v}"), join(&view.camera.to_record()));
    }
    write_kv(&dir.join("meta"), &meta)?;
    for (k, step) in demo.steps.iter().enumerate() {
        let sd = step_dir(dir, k);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (v, view) in step.observation.views.iter().enumerate() {
            view.rgb.write_ppm(&sd.join(format!("view_{v}.rgb.ppm")))?;
            view.depth.write_raw(&sd.join(format!("view_{v}.depth.bin")))?;
            step.labels[v].write_pgm(&sd.join(format!("view_{v}.mask.pgm")))?;
        }
        write_kv(&sd.join("action.kv"), &action_kv(&step.action, &step.observation.proprio))?;
    }
    Ok(())
}

/// Reads the `meta` file of a demo directory.
pub fn read_demo_meta(dir: &Path) -> Result<BTreeMap<String, String>> {
    read_kv(&dir.join("meta"))
}

pub fn read_demo(dir: &Path) -> Result<DemoTrajectory> {
    let meta_path = dir.join("meta");
    let meta = read_kv(&meta_path)?;
    let kv = KvReader {
        map: &meta,
        path: &meta_path,
    };
    let steps: usize = kv.parse("steps")?;
    let views: usize = kv.parse("views")?;
    let cams = (0..views)
        .map(|v| Camera::from_record(&kv.list::<f64>(&format!("camera.{v}"))?))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let sd = step_dir(dir, k);
        let mut obs_views = Vec::with_capacity(views);
        let mut labels = Vec::with_capacity(views);
        for (v, cam) in cams.iter().enumerate() {
            let rgb = RgbImage::read_ppm(&sd.join(format!("view_{v}.rgb.ppm")))?;
            let depth = DepthImage::read_raw(&sd.join(format!("view_{v}.depth.bin")), cam.width(), cam.height())?;
            labels.push(LabelImage::read_pgm(&sd.join(format!("view_{v}.mask.pgm")))?);
            obs_views.push(View {
                camera: cam.clone(),
                rgb,
                depth,
            });
        }
        let akv_path = sd.join("action.kv");
        let akv = read_kv(&akv_path)?;
        let (action, proprio) = parse_action(&KvReader {
            map: &akv,
            path: &akv_path,
        })?;
        out.push(DemoStep {
            observation: Observation {
                views: obs_views,
                proprio,
            },
            action,
            next_rgb: None,
            labels,
        });
    }
    for k in 0..steps.saturating_sub(1) {
        let next: Vec<RgbImage> = out[k + 1].observation.views.iter().map(|v| v.rgb.clone()).collect();
        out[k].next_rgb = Some(next);
    }
    let demo = DemoTrajectory {
        steps: out,
        language: kv.str("language")?.to_string(),
    };
    demo.validate()?;
    Ok(demo)
}

/// Demo directories under `<root>/demos`, sorted by name.
pub fn demo_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let demos = root.join("demos");
    let entries = fs::read_dir(&demos).map_err(|e| Error::io(&demos, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&demos, e))?;
        if e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::parse(demos, "dataset contains no demos"));
    }
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<DemoTrajectory>> {
    demo_dirs(root)?.iter().map(|d| read_demo(d)).collect()
}
