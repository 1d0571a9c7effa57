//! Wire framing: `u32 length ‖ u8 kind ‖ u16 channel ‖ payload`, big-endian,
//! where the length covers kind, channel and payload.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Bytes of kind + channel counted by the length field.
const FRAME_OVERHEAD: usize = 3;
/// Largest payload whose length field still fits in a `u32`.
pub const MAX_PAYLOAD: usize = u32::MAX as usize - FRAME_OVERHEAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Register = 0x01,
    Plan = 0x02,
    Sync = 0x03,
    Data = 0x04,
    Ack = 0x05,
    Timing = 0x06,
}

impl FrameKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Self::Register,
            0x02 => Self::Plan,
            0x03 => Self::Sync,
            0x04 => Self::Data,
            0x05 => Self::Ack,
            0x06 => Self::Timing,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub channel: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, channel: u16, payload: impl Into<Vec<u8>>) -> Self {
        Self { kind, channel, payload: payload.into() }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes is too large for one frame")]
    Oversize(usize),
    #[error("unknown frame kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("length field {0} is shorter than the frame header")]
    BadLength(u32),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, FrameError> {
    let mut out = Vec::with_capacity(4 + FRAME_OVERHEAD + f.payload.len());
    write_header(&mut out, f.kind, f.channel, f.payload.len())?;
    out.extend_from_slice(&f.payload);
    Ok(out)
}

fn write_header(out: &mut Vec<u8>, kind: FrameKind, channel: u16, payload_len: usize) -> Result<(), FrameError> {
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(payload_len));
    }
    out.extend_from_slice(&((payload_len + FRAME_OVERHEAD) as u32).to_be_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&channel.to_be_bytes());
    Ok(())
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let mut cursor = bytes;
    match read_frame(&mut cursor)? {
        Some(f) => Ok((f, bytes.len() - cursor.len())),
        None => Err(FrameError::Truncated),
    }
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly on a frame
/// boundary.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Frame>, FrameError> {
    let mut len = [0u8; 4];
    match read_full(r, &mut len)? {
        0 => return Ok(None),
        4 => {}
        _ => return Err(FrameError::Truncated),
    }
    let len = u32::from_be_bytes(len);
    if (len as usize) < FRAME_OVERHEAD {
        return Err(FrameError::BadLength(len));
    }
    let mut header = [0u8; FRAME_OVERHEAD];
    if read_full(r, &mut header)? != FRAME_OVERHEAD {
        return Err(FrameError::Truncated);
    }
    let kind = FrameKind::from_byte(header[0]).ok_or(FrameError::UnknownKind(header[0]))?;
    let channel = u16::from_be_bytes([header[1], header[2]]);
    let mut payload = Vec::new();
    let want = len as usize - FRAME_OVERHEAD;
    let got = r.take(want as u64).read_to_end(&mut payload)?;
    if got != want {
        return Err(FrameError::Truncated);
    }
    Ok(Some(Frame { kind, channel, payload }))
}

/// Writes a frame in a single `write_all`.
pub fn write_frame<W: Write + ?Sized>(w: &mut W, kind: FrameKind, channel: u16, payload: &[u8]) -> Result<(), FrameError> {
    let mut buf = Vec::with_capacity(4 + FRAME_OVERHEAD + payload.len());
    write_header(&mut buf, kind, channel, payload.len())?;
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn register_frame_bytes() {
        let f = Frame::new(FrameKind::Register, 1, "192.168.1.5");
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(hex(&bytes), "00 00 00 0E 01 00 01 31 39 32 2E 31 36 38 2E 31 2E 35");
        assert_eq!(decode_frame(&bytes).unwrap(), (f, bytes.len()));
    }

    #[test]
    fn empty_sync_and_ack() {
        let sync = Frame::new(FrameKind::Sync, 1, vec![]);
        let ack = Frame::new(FrameKind::Ack, 2, vec![]);
        assert_eq!(hex(&encode_frame(&sync).unwrap()), "00 00 00 03 03 00 01");
        assert_eq!(hex(&encode_frame(&ack).unwrap()), "00 00 00 03 05 00 02");
        for f in [sync, ack] {
            assert_eq!(decode_frame(&encode_frame(&f).unwrap()).unwrap().0, f);
        }
    }

    #[test]
    fn unknown_kind() {
        let bytes = [0, 0, 0, 3, 0x09, 0, 1];
        assert!(matches!(decode_frame(&bytes), Err(FrameError::UnknownKind(0x09))));
    }

    #[test]
    fn truncated_streams() {
        assert!(matches!(decode_frame(&[0, 0, 0]), Err(FrameError::Truncated)));
        assert!(matches!(decode_frame(&[0, 0, 0, 5, 4, 0, 1, 9]), Err(FrameError::Truncated)));
        assert!(matches!(decode_frame(&[]), Err(FrameError::Truncated)));
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn short_length_field() {
        assert!(matches!(decode_frame(&[0, 0, 0, 2, 4, 0]), Err(FrameError::BadLength(2))));
    }

    #[test]
    fn consumes_exactly_one_frame() {
        let mut bytes = encode_frame(&Frame::new(FrameKind::Data, 7, vec![1, 2, 3])).unwrap();
        let first = bytes.len();
        bytes.extend(encode_frame(&Frame::new(FrameKind::Ack, 7, vec![])).unwrap());
        let (f, used) = decode_frame(&bytes).unwrap();
        assert_eq!((f.payload.as_slice(), used), (&[1u8, 2, 3][..], first));
    }

    fn kinds() -> impl Strategy<Value = FrameKind> {
        prop_oneof![
            Just(FrameKind::Register),
            Just(FrameKind::Plan),
            Just(FrameKind::Sync),
            Just(FrameKind::Data),
            Just(FrameKind::Ack),
            Just(FrameKind::Timing),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn round_trip(kind in kinds(), channel: u16, payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let f = Frame { kind, channel, payload };
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(bytes.len(), 7 + f.payload.len());
            let (back, used) = decode_frame(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, f);
        }
    }
}
