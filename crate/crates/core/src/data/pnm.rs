//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use crate::error::{Result, SegError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P5, one sample per pixel.
    Gray,
    /// P6, three samples per pixel.
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }

    fn magic(self) -> &'static str {
        match self {
            PnmKind::Gray => "P5",
            PnmKind::Rgb => "P6",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(SegError::format(format!("expected {what} in PNM header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| SegError::format(format!("{what} out of range in PNM header")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(SegError::format("not a binary PGM/PPM (expected P5 or P6 magic)")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(SegError::format(format!("empty image {width}×{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(SegError::format(format!(
            "maxval {maxval} unsupported (8-bit samples only)"
        )));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(SegError::format("missing whitespace after maxval"));
    }
    let start = h.pos + 1;
    let len = width * height * kind.channels();
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| {
            SegError::format(format!(
                "truncated pixel data: need {len} bytes, have {}",
                bytes.len().saturating_sub(start)
            ))
        })?
        .to_vec();
    Ok(Pnm {
        kind,
        width,
        height,
        maxval: maxval as u16,
        data,
    })
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let mut out = format!("{}\n{} {}\n{}\n", p.kind.magic(), p.width, p.height, p.maxval).into_bytes();
    out.extend_from_slice(&p.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let p = decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.kind), (2, 1, PnmKind::Rgb));
        assert_eq!(p.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn round_trip() {
        let p = Pnm {
            kind: PnmKind::Gray,
            width: 3,
            height: 2,
            maxval: 255,
            data: vec![0, 10, 32, 200, 255, 13],
        };
        assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn malformed() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x01\x02").unwrap_err().to_string().contains("truncated"));
        assert!(decode(b"P5\n2 2\n65535\n").is_err());
        assert!(decode(b"P5\nx 2\n255\n").is_err());
    }
}
