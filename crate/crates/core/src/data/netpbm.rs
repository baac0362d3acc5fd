//! Binary netpbm: P5 (grayscale) and P6 (RGB), 8-bit samples.

/// A decoded P5/P6 image with interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{what} out of range"))
    }
}

/// Decode a P5 or P6 file. Only `maxval <= 255` is supported.
pub fn decode(bytes: &[u8]) -> Result<Pnm, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("magic is not P5 or P6".into()),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(format!("payload has {} bytes, expected {need}", payload.len()));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples: payload[..need].to_vec(),
    })
}

/// Encode with `maxval` 255. `samples` are interleaved, `channels` is 1 or 3.
pub fn encode(width: usize, height: usize, channels: usize, samples: &[u8]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height * channels);
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}
