use crate::{Error, Result};

/// 8-bit raster, grayscale (1 channel) or RGB (3 channels), row-major with
/// interleaved channels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn white(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![255; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            // luma of the fill colour; only black is used for grayscale scenes
            let l = (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64).round();
            self.data[i] = l as u8;
        } else {
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Binary netpbm encoding: P5 for grayscale, P6 for RGB, maxval 255.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_netpbm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Data("truncated netpbm header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
                Error::Data("netpbm header is not ASCII".into())
            })?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Data(format!("unsupported netpbm magic {m:?}"))),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad netpbm header field {s:?}")))
        };
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported maxval {maxval}")));
        }
        let len = width * height * channels;
        let data = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Data("truncated netpbm raster".into()))?
            .to_vec();
        Ok(Self { width, height, channels, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_header_layout() {
        let img = Image::white(3, 2, 1);
        let bytes = img.to_netpbm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(Image::from_netpbm(&bytes).unwrap(), img);
    }

    #[test]
    fn reads_comments_and_rejects_truncation() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = Image::from_netpbm(&bytes).unwrap();
        assert_eq!(img.data, vec![1, 2, 3]);
        assert!(Image::from_netpbm(&bytes[..bytes.len() - 1]).is_err());
        assert!(Image::from_netpbm(b"P3\n1 1\n255\n").is_err());
    }
}
