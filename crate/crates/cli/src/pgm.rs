//! 8-bit binary PGM previews. Intensities are clamped to `[0, 1]`.

use std::fs;
use std::path::Path;

use usplane::SliceImage;

pub fn encode_pgm(img: &SliceImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, img: &SliceImage) -> usplane::Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_clamping() {
        let img = SliceImage::new(1, 3, 1.0, vec![-1.0, 0.5, 2.0]).unwrap();
        let b = encode_pgm(&img);
        assert_eq!(&b[..11], b"P5\n3 1\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255]);
    }
}
