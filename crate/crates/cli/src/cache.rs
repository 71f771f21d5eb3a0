//! Preprocessed dataset cache and manifest written by `fila prepare`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use anyhow::{bail, Context, Result};
use fila_core::checkpoint::Container;
use fila_core::data::{DatasetSpec, ImagePair, PreprocessOptions, RawEntry, SourceGeometry};

pub const CACHE_FILE: &str = "cache.fila";
pub const MANIFEST_FILE: &str = "manifest.tsv";

fn fingerprint(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).with_context(|| format!("reading {}", path.display()))?;
    let mtime = meta.modified().ok().and_then(|t| t.duration_since(UNIX_EPOCH).ok()).map_or(0, |d| d.as_nanos());
    Ok(format!("{}:{}", meta.len(), mtime))
}

fn sources(entries: &[RawEntry]) -> Result<String> {
    let mut s = String::new();
    for e in entries {
        write!(s, "{}|{}|{}", e.id, fingerprint(&e.image)?, fingerprint(&e.gt)?)?;
        if let Some(m) = &e.mask {
            write!(s, "|{}", fingerprint(m)?)?;
        }
        s.push(';');
    }
    Ok(s)
}

fn options_header(c: &mut Container, opts: &PreprocessOptions) {
    c.set("data.kind", opts.kind.as_str());
    c.set("data.target_size", opts.target_size);
    c.set("data.crop_size", opts.crop_size.unwrap_or(0));
}

fn options_match(c: &Container, opts: &PreprocessOptions) -> bool {
    c.get("data.kind").ok() == Some(opts.kind.as_str())
        && c.get_parsed::<usize>("data.target_size").ok() == Some(opts.target_size)
        && c.get_parsed::<usize>("data.crop_size").ok() == Some(opts.crop_size.unwrap_or(0))
}

pub fn to_container(pairs: &[ImagePair], opts: &PreprocessOptions) -> Container {
    let mut c = Container::new();
    options_header(&mut c, opts);
    c.set("pairs", pairs.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join(","));
    for p in pairs {
        let g = &p.geometry;
        c.set(&format!("pair.{}.original", p.id), format!("{},{}", g.original.0, g.original.1));
        if let Some((t, l, s)) = g.crop {
            c.set(&format!("pair.{}.crop", p.id), format!("{t},{l},{s}"));
        }
        c.insert(format!("{}/image", p.id), p.image.clone());
        c.insert(format!("{}/segmentation", p.id), p.segmentation.clone());
        if let Some(m) = &p.mask {
            c.insert(format!("{}/mask", p.id), m.clone());
        }
    }
    c
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|x| x.parse().with_context(|| format!("bad number in {s:?}"))).collect()
}

pub fn from_container(c: &Container) -> Result<Vec<ImagePair>> {
    let ids = c.get("pairs")?;
    let mut out = Vec::new();
    for id in ids.split(',').filter(|s| !s.is_empty()) {
        let o = parse_list(c.get(&format!("pair.{id}.original"))?)?;
        let crop = match c.header.get(&format!("pair.{id}.crop")) {
            Some(v) => {
                let v = parse_list(v)?;
                Some((v[0], v[1], v[2]))
            }
            None => None,
        };
        out.push(ImagePair {
            id: id.to_string(),
            image: c.tensor(&format!("{id}/image"))?.clone(),
            segmentation: c.tensor(&format!("{id}/segmentation"))?.clone(),
            mask: c.tensors.get(&format!("{id}/mask")).cloned(),
            geometry: SourceGeometry { original: (o[0], o[1]), crop },
        });
    }
    Ok(out)
}

pub enum Prepared {
    Fresh(usize),
    Written(usize),
}

/// Preprocess `root` into `out_dir`, skipping the work when an existing
/// cache was built from the same files with the same options.
pub fn prepare(root: &Path, opts: &PreprocessOptions, out_dir: &Path) -> Result<Prepared> {
    let spec = DatasetSpec { root: root.to_path_buf(), options: opts.clone() };
    let entries = spec.entries()?;
    let fp = sources(&entries)?;
    let cache_path = out_dir.join(CACHE_FILE);
    if cache_path.exists() {
        if let Ok(c) = Container::read(&cache_path) {
            if options_match(&c, opts) && c.get("sources").ok() == Some(fp.as_str()) {
                return Ok(Prepared::Fresh(entries.len()));
            }
        }
    }
    let pairs = spec.load()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut c = to_container(&pairs, opts);
    c.set("sources", fp);
    c.write(&cache_path)?;
    let mut manifest = String::from("id\timage\tgt\tmask\toriginal_h\toriginal_w\tcrop\n");
    for (e, p) in entries.iter().zip(&pairs) {
        let crop = p.geometry.crop.map_or("-".to_string(), |(t, l, s)| format!("{t},{l},{s}"));
        writeln!(
            manifest,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.image.display(),
            e.gt.display(),
            e.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string()),
            p.geometry.original.0,
            p.geometry.original.1,
            crop
        )?;
    }
    fs::write(out_dir.join(MANIFEST_FILE), manifest).context("writing manifest")?;
    Ok(Prepared::Written(pairs.len()))
}

/// Load pairs from a cache file, a directory holding one, or a raw
/// `images/` + `gt/` dataset directory.
pub fn load_pairs(path: &Path, opts: &PreprocessOptions) -> Result<Vec<ImagePair>> {
    let cache: Option<PathBuf> = if path.is_file() {
        Some(path.to_path_buf())
    } else if path.join(CACHE_FILE).is_file() {
        Some(path.join(CACHE_FILE))
    } else {
        None
    };
    match cache {
        Some(p) => {
            let c = Container::read(&p)?;
            let size: usize = c.get_parsed("data.target_size")?;
            if size != opts.target_size {
                bail!("{} was prepared at {size}x{size}, but target size is {}", p.display(), opts.target_size);
            }
            from_container(&c)
        }
        None => Ok(DatasetSpec { root: path.to_path_buf(), options: opts.clone() }.load()?),
    }
}
