//! Binary greyscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Encodes an `H×W` grid with values in `[0, 1]` as `round(v·255)`.
pub fn encode_pgm(image: &Grid) -> Result<Vec<u8>> {
    let [h, w] = image.shape() else {
        return Err(Error::BadDims(format!(
            "PGM needs an H×W grid, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Decodes a `P5` file into an `H×W` grid of `byte / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        *field = header_number(bytes, &mut pos)?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::BadDims(format!("PGM of size {w}×{h}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::TruncatedFile);
    }
    pos += 1;
    let n = w as usize * h as usize;
    let raster = bytes.get(pos..pos + n).ok_or(Error::TruncatedFile)?;
    Grid::new(
        &[h as usize, w as usize],
        raster.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Skips whitespace and `#` comments, then parses a decimal number.
fn header_number(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        match bytes.get(*pos) {
            None => return Err(Error::TruncatedFile),
            Some(b'#') => {
                while let Some(&c) = bytes.get(*pos) {
                    *pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(if *pos >= bytes.len() {
            Error::TruncatedFile
        } else {
            Error::BadMagic
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("digits are ASCII")
        .parse()
        .map_err(|_| Error::BadDims("PGM header number out of range".into()))
}

pub fn write_image(path: impl AsRef<Path>, image: &Grid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads a mask file, mapping bytes ≥ 128 to 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Grid> {
    Ok(read_image(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments_and_odd_spacing() {
        let mut f = b"P5 # made by hand\n# another\n 3\t2\r\n255\n".to_vec();
        f.extend([0, 51, 255, 102, 153, 204]);
        let g = decode_pgm(&f).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        assert_eq!(g.data()[1], 0.2);
        assert_eq!(g.data()[2], 1.0);
    }

    #[test]
    fn zeros_give_zero_bytes() {
        let bytes = encode_pgm(&Grid::zeros(&[2, 4])).unwrap();
        assert_eq!(&bytes[..11], b"P5\n4 2\n255\n");
        assert!(bytes[11..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 19);
    }

    #[test]
    fn clamping_and_rounding() {
        let g = Grid::new(&[1, 4], vec![-0.3, 1.7, 0.5, 0.1]).unwrap();
        let back = decode_pgm(&encode_pgm(&g).unwrap()).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0);
        assert_eq!(back.data()[2], 128.0 / 255.0);
        assert_eq!(back.data()[3], 26.0 / 255.0);
    }

    #[test]
    fn error_cases() {
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n0"),
            Err(Error::BadMagic)
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\0\0\0"),
            Err(Error::TruncatedFile)
        ));
        assert!(matches!(decode_pgm(b"P5\n2 2"), Err(Error::TruncatedFile)));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::UnsupportedMaxval(65535))
        ));
    }
}
