//! YUV4MPEG2 stream writer and reader: the raw-video pipe format exchanged
//! with external encoders and decoders.

use super::CodecError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chroma {
    C444,
    C420,
    Mono,
}

impl Chroma {
    fn tag(self) -> &'static str {
        match self {
            Chroma::C444 => "C444",
            Chroma::C420 => "C420jpeg",
            Chroma::Mono => "Cmono",
        }
    }

    fn parse(tag: &str) -> Result<Self, CodecError> {
        match tag {
            "444" => Ok(Chroma::C444),
            t if t.starts_with("420") => Ok(Chroma::C420),
            "mono" => Ok(Chroma::Mono),
            other => Err(CodecError::Stream(format!("unsupported y4m colorspace C{other}"))),
        }
    }

    /// Chroma plane dimensions for a luma of `width x height`.
    pub fn chroma_dims(self, width: usize, height: usize) -> Option<(usize, usize)> {
        match self {
            Chroma::C444 => Some((width, height)),
            Chroma::C420 => Some((width.div_ceil(2), height.div_ceil(2))),
            Chroma::Mono => None,
        }
    }

    pub fn frame_bytes(self, width: usize, height: usize) -> usize {
        width * height + self.chroma_dims(width, height).map_or(0, |(w, h)| 2 * w * h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: usize,
    pub height: usize,
    pub fps: (u32, u32),
    pub chroma: Chroma,
}

/// One frame of planar 8-bit samples: Y then (optionally) U and V.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YuvFrame {
    pub y: Vec<u8>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
}

pub fn write_stream(header: &StreamHeader, frames: &[YuvFrame]) -> Vec<u8> {
    let mut out = format!(
        "YUV4MPEG2 W{} H{} F{}:{} Ip A1:1 {}\n",
        header.width,
        header.height,
        header.fps.0,
        header.fps.1,
        header.chroma.tag()
    )
    .into_bytes();
    for f in frames {
        out.extend_from_slice(b"FRAME\n");
        out.extend_from_slice(&f.y);
        out.extend_from_slice(&f.u);
        out.extend_from_slice(&f.v);
    }
    out
}

pub fn read_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<YuvFrame>), CodecError> {
    let line_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CodecError::Stream("missing y4m header".into()))?;
    let line = std::str::from_utf8(&bytes[..line_end]).map_err(|_| CodecError::Stream("non-ascii y4m header".into()))?;
    let mut tokens = line.split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(CodecError::Stream("bad y4m signature".into()));
    }
    let (mut width, mut height, mut fps, mut chroma) = (0, 0, (25, 1), Chroma::C420);
    for tok in tokens.filter(|t| !t.is_empty()) {
        let (key, val) = tok.split_at(1);
        match key {
            "W" => width = val.parse().map_err(|_| CodecError::Stream(format!("bad width {val}")))?,
            "H" => height = val.parse().map_err(|_| CodecError::Stream(format!("bad height {val}")))?,
            "F" => {
                let (n, d) = val.split_once(':').ok_or_else(|| CodecError::Stream(format!("bad rate {val}")))?;
                fps = (
                    n.parse().map_err(|_| CodecError::Stream(format!("bad rate {val}")))?,
                    d.parse().map_err(|_| CodecError::Stream(format!("bad rate {val}")))?,
                );
            }
            "C" => chroma = Chroma::parse(val)?,
            _ => {}
        }
    }
    if width == 0 || height == 0 {
        return Err(CodecError::Stream("y4m header without dimensions".into()));
    }
    let header = StreamHeader {
        width,
        height,
        fps,
        chroma,
    };
    let luma = width * height;
    let chroma_len = chroma.chroma_dims(width, height).map_or(0, |(w, h)| w * h);
    let frame_len = header.chroma.frame_bytes(width, height);
    let mut frames = Vec::new();
    let mut pos = line_end + 1;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if !rest.starts_with(b"FRAME") {
            return Err(CodecError::Stream(format!("expected FRAME marker at byte {pos}")));
        }
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CodecError::Stream("unterminated FRAME marker".into()))?;
        let start = pos + nl + 1;
        let end = start + frame_len;
        if end > bytes.len() {
            return Err(CodecError::Stream(format!("truncated frame {}", frames.len())));
        }
        let data = &bytes[start..end];
        frames.push(YuvFrame {
            y: data[..luma].to_vec(),
            u: data[luma..luma + chroma_len].to_vec(),
            v: data[luma + chroma_len..].to_vec(),
        });
        pos = end;
    }
    Ok((header, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_round_trip() {
        let header = StreamHeader {
            width: 3,
            height: 3,
            fps: (30, 1),
            chroma: Chroma::C420,
        };
        let frame = YuvFrame {
            y: (0..9).collect(),
            u: vec![1, 2, 3, 4],
            v: vec![5, 6, 7, 8],
        };
        let bytes = write_stream(&header, &[frame.clone(), frame.clone()]);
        assert!(bytes.starts_with(b"YUV4MPEG2 W3 H3 F30:1 Ip A1:1 C420jpeg\n"));
        let (h, frames) = read_stream(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(frames, vec![frame.clone(), frame]);
    }

    #[test]
    fn frame_parameters_and_mono() {
        let bytes = b"YUV4MPEG2 W2 H1 F25:1 Cmono XYSCSS=MONO\nFRAME Ixyz\n\x01\x02FRAME\n\x03\x04";
        let (h, frames) = read_stream(bytes).unwrap();
        assert_eq!(h.chroma, Chroma::Mono);
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].y, vec![3, 4]);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        assert!(read_stream(b"YUV4MPEG2 W2 H2 C444\nFRAME\n\x01").is_err());
        assert!(read_stream(b"MPEG W2 H2\n").is_err());
    }
}
