//! Files: atomic writes and 8-bit RGB image load/save.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::raster::Image;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Loads a PNG/PPM (any format the decoder recognizes) as RGB in [0, 1].
pub fn load_image(path: &Path) -> Result<Image, image::ImageError> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image::from_planar(w, h, data))
}

/// Encodes an image as 8-bit RGB; the container follows the file extension.
pub fn save_image(img: &Image, path: &Path) -> Result<(), image::ImageError> {
    let buf = img.to_rgb8();
    let format = image::ImageFormat::from_path(path)?;
    let mut bytes = Vec::new();
    image::write_buffer_with_format(
        &mut io::Cursor::new(&mut bytes),
        &buf,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        format,
    )?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Image files (png, ppm, pnm) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    out.sort();
    Ok(out)
}
