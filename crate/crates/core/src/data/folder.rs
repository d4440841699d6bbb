//! Image decoding and folder-layout ingestion.
//!
//! Layout: `root/<label_dir>/<file>.png` for ungrouped images and
//! `root/<label_dir>/<group>/<file>.png` for images sharing a group id
//! (a video, a subject). `label_dir` is mapped to a label by the caller.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{Label, RgbImage, Sample};
use crate::error::{Error, Result};

/// Decodes an encoded image and resizes it to `size×size` when needed.
pub fn decode_image(bytes: &[u8], size: Option<usize>) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Dataset("image has zero extent".into()));
    }
    let img = match size {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    Ok(RgbImage::from_rgb8(&img))
}

pub fn read_image(path: &Path, size: Option<usize>) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, size)
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    image.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every PNG below `root`. Unreadable images are skipped with a
/// warning; a label directory missing from `label_map` is an error.
pub fn load_image_folder(root: &Path, label_map: &BTreeMap<String, Label>, size: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let label = *label_map
            .get(&name)
            .ok_or_else(|| Error::Dataset(format!("directory `{name}` has no label mapping")))?;
        let mut push = |path: &Path, group: Option<&str>| match read_image(path, Some(size)) {
            Ok(image) => {
                let id = match group {
                    Some(g) => format!("{name}/{g}/{}", stem(path)),
                    None => format!("{name}/{}", stem(path)),
                };
                samples.push(Sample {
                    id,
                    image,
                    label,
                    pai_type: (label == Label::Attack).then(|| name.clone()),
                    group_id: group.map(str::to_string),
                });
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        };
        for entry in sorted_entries(&dir)? {
            if entry.is_dir() {
                let group = stem(&entry);
                for file in sorted_entries(&entry)?.into_iter().filter(|p| is_png(p)) {
                    push(&file, Some(&group));
                }
            } else if is_png(&entry) {
                push(&entry, None);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", root.display())));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(v: f64) -> RgbImage {
        RgbImage::filled(4, 4, v)
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = tiny(0.3);
        img.set(1, 2, 0, 0.9);
        let path = dir.path().join("x.png");
        write_png(&path, &img).unwrap();
        let back = read_image(&path, None).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(read_image(&path, Some(8)).unwrap().height, 8);
    }

    #[test]
    fn folder_layout_with_groups() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("real/vid1")).unwrap();
        fs::create_dir_all(root.join("print")).unwrap();
        write_png(&root.join("real/vid1/f0.png"), &tiny(0.2)).unwrap();
        write_png(&root.join("real/vid1/f1.png"), &tiny(0.4)).unwrap();
        write_png(&root.join("real/solo.png"), &tiny(0.4)).unwrap();
        write_png(&root.join("print/a.png"), &tiny(0.6)).unwrap();
        fs::write(root.join("print/broken.png"), b"not a png").unwrap();
        fs::write(root.join("notes.txt"), b"ignored").unwrap();
        let map: BTreeMap<String, Label> =
            [("real".to_string(), Label::BonaFide), ("print".to_string(), Label::Attack)].into();
        let s = load_image_folder(root, &map, 8).unwrap();
        assert_eq!(s.len(), 4);
        let grouped: Vec<_> = s.iter().filter(|x| x.group_id.as_deref() == Some("vid1")).collect();
        assert_eq!(grouped.len(), 2);
        let attack = s.iter().find(|x| x.label == Label::Attack).unwrap();
        assert_eq!(attack.pai_type.as_deref(), Some("print"));
        assert!(s.iter().all(|x| x.image.height == 8));

        let partial: BTreeMap<String, Label> = [("real".to_string(), Label::BonaFide)].into();
        assert!(matches!(load_image_folder(root, &partial, 8), Err(Error::Dataset(_))));
    }

    #[test]
    fn garbage_bytes_are_an_error() {
        assert!(decode_image(b"", None).is_err());
        assert!(decode_image(&[0x89, b'P', b'N', b'G'], Some(4)).is_err());
    }
}
