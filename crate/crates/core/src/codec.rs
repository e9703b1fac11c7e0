//! Synchrophasor data and command frames.
//!
//! Data frame layout, big-endian throughout:
//!
//! ```text
//! SYNC(2) FRAMESIZE(2) IDCODE(2) SOC(4) FRACSEC(4)
//!   { STAT(2) PHASORS(n × 4|8) FREQ(2|4) DFREQ(2|4) } × blocks
//! CHK(2)
//! ```
//!
//! Phasors are rectangular. Configuration frames are not implemented; the
//! decoder is given the stream shape as a [`StreamLayout`] instead.

use std::fmt;

use thiserror::Error;

use crate::crc::crc_ccitt;

pub const DATA_SYNC: u16 = 0xAA01;
pub const COMMAND_SYNC: u16 = 0xAA41;
/// FRACSEC ticks per second.
pub const TIME_BASE: u32 = 1_000_000;
pub const HEADER_LEN: usize = 14;
pub const CHK_LEN: usize = 2;
pub const COMMAND_FRAME_LEN: usize = HEADER_LEN + 2 + CHK_LEN;
/// Headroom above nominal magnitude covered by the fixed-point range.
pub const FIXED16_HEADROOM: f64 = 1.5;
/// ROCOF fixed-point counts per Hz/s.
pub const ROCOF_COUNTS_PER_HZ_S: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bad sync word {found:#06x}")]
    Framing { found: u16 },
    #[error("length mismatch: header says {declared} bytes, got {actual}")]
    Length { declared: usize, actual: usize },
    #[error("checksum mismatch: frame carries {carried:#06x}, computed {computed:#06x}")]
    Integrity { carried: u16, computed: u16 },
    #[error("value {value} overflows fixed16 at scale {scale}")]
    Overflow { value: f64, scale: f64 },
    #[error("frame of {0} bytes exceeds the 16-bit FRAMESIZE field")]
    TooLarge(usize),
    #[error("frame has no blocks")]
    NoBlocks,
    #[error("frame does not match stream layout: {0}")]
    LayoutMismatch(String),
    #[error("unknown command code {0:#06x}")]
    UnknownCommand(u16),
    #[error("fracsec {0} out of range")]
    BadFracsec(u32),
    #[error("non-finite value in frame")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Timestamp {
    pub soc: u32,
    pub fracsec: u32,
}

impl Timestamp {
    pub fn new(soc: u32, fracsec: u32) -> Result<Self, CodecError> {
        if fracsec >= TIME_BASE {
            return Err(CodecError::BadFracsec(fracsec));
        }
        Ok(Self { soc, fracsec })
    }

    pub fn from_micros(us: u64) -> Self {
        Self {
            soc: (us / u64::from(TIME_BASE)) as u32,
            fracsec: (us % u64::from(TIME_BASE)) as u32,
        }
    }

    pub fn as_micros(self) -> u64 {
        u64::from(self.soc) * u64::from(TIME_BASE) + u64::from(self.fracsec)
    }

    pub fn as_secs_f64(self) -> f64 {
        f64::from(self.soc) + f64::from(self.fracsec) / f64::from(TIME_BASE)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.soc, self.fracsec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Phasor {
    pub re: f64,
    pub im: f64,
}

impl Phasor {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn magnitude(self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PmuBlock {
    /// 0 means valid data.
    pub stat: u16,
    pub phasors: Vec<Phasor>,
    /// Frequency deviation from nominal, mHz.
    pub freq_dev: f64,
    /// Hz/s.
    pub rocof: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataFrame {
    pub idcode: u16,
    pub timestamp: Timestamp,
    pub blocks: Vec<PmuBlock>,
}

impl DataFrame {
    pub fn shape(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.phasors.len()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Fixed16,
    Float32,
}

impl Format {
    fn phasor_len(self) -> usize {
        match self {
            Format::Fixed16 => 4,
            Format::Float32 => 8,
        }
    }

    fn scalar_len(self) -> usize {
        match self {
            Format::Fixed16 => 2,
            Format::Float32 => 4,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Fixed16 => "fixed",
            Format::Float32 => "float",
        })
    }
}

/// Per-block channel description: nominal magnitude of each phasor channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub nominal: Vec<f64>,
}

impl BlockLayout {
    pub fn uniform(n_phasors: usize, nominal: f64) -> Self {
        Self {
            nominal: vec![nominal; n_phasors],
        }
    }

    /// Fixed16 counts-to-per-unit factor of channel `k`.
    pub fn scale(&self, k: usize) -> f64 {
        fixed16_scale(self.nominal[k])
    }
}

/// What a configuration frame would carry: data format and per-block channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamLayout {
    pub format: Format,
    pub blocks: Vec<BlockLayout>,
}

impl StreamLayout {
    pub fn new(format: Format, blocks: Vec<BlockLayout>) -> Self {
        Self { format, blocks }
    }

    pub fn uniform(format: Format, shape: &[usize], nominal: f64) -> Self {
        Self {
            format,
            blocks: shape
                .iter()
                .map(|&n| BlockLayout::uniform(n, nominal))
                .collect(),
        }
    }

    /// Layout of an aggregate frame whose blocks are the concatenation of `parts`.
    pub fn concat<'a>(format: Format, parts: impl IntoIterator<Item = &'a StreamLayout>) -> Self {
        Self {
            format,
            blocks: parts
                .into_iter()
                .flat_map(|l| l.blocks.iter().cloned())
                .collect(),
        }
    }

    pub fn frame_size(&self) -> usize {
        let f = self.format;
        HEADER_LEN
            + self
                .blocks
                .iter()
                .map(|b| 2 + b.nominal.len() * f.phasor_len() + 2 * f.scalar_len())
                .sum::<usize>()
            + CHK_LEN
    }

    fn check_shape(&self, frame: &DataFrame) -> Result<(), CodecError> {
        let want: Vec<usize> = self.blocks.iter().map(|b| b.nominal.len()).collect();
        let got = frame.shape();
        if want != got {
            return Err(CodecError::LayoutMismatch(format!(
                "layout shape {want:?}, frame shape {got:?}"
            )));
        }
        Ok(())
    }
}

/// Bytes of a data frame with `n_blocks` blocks of `n_phasors` phasors each.
pub fn data_frame_size(n_blocks: usize, n_phasors: usize, format: Format) -> usize {
    HEADER_LEN
        + n_blocks * (2 + n_phasors * format.phasor_len() + 2 * format.scalar_len())
        + CHK_LEN
}

/// Scale giving full-range fixed16 counts at 1.5 × nominal.
pub fn fixed16_scale(nominal: f64) -> f64 {
    FIXED16_HEADROOM * nominal / f64::from(i16::MAX)
}

pub fn quantize_fixed16(x: f64, scale: f64) -> Result<i16, CodecError> {
    let counts = (x / scale).round();
    if !counts.is_finite() || counts.abs() > f64::from(i16::MAX) {
        return Err(CodecError::Overflow { value: x, scale });
    }
    Ok(counts as i16)
}

pub fn dequantize_fixed16(q: i16, scale: f64) -> f64 {
    f64::from(q) * scale
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn i16(&mut self, v: i16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f32(&mut self, v: f64) -> Result<(), CodecError> {
        if !v.is_finite() {
            return Err(CodecError::NonFinite);
        }
        self.0.extend_from_slice(&(v as f32).to_be_bytes());
        Ok(())
    }
    fn fixed(&mut self, v: f64, scale: f64) -> Result<(), CodecError> {
        if !v.is_finite() {
            return Err(CodecError::NonFinite);
        }
        self.i16(quantize_fixed16(v, scale)?);
        Ok(())
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc_ccitt(&self.0);
        self.u16(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn u16(&mut self) -> u16 {
        u16::from_be_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_be_bytes(self.take())
    }
    fn i16(&mut self) -> i16 {
        i16::from_be_bytes(self.take())
    }
    fn f32(&mut self) -> f64 {
        f64::from(f32::from_be_bytes(self.take()))
    }
}

fn header(sync: u16, size: usize, idcode: u16, ts: Timestamp) -> Result<Writer, CodecError> {
    let framesize = u16::try_from(size).map_err(|_| CodecError::TooLarge(size))?;
    if ts.fracsec >= TIME_BASE {
        return Err(CodecError::BadFracsec(ts.fracsec));
    }
    let mut w = Writer(Vec::with_capacity(size));
    w.u16(sync);
    w.u16(framesize);
    w.u16(idcode);
    w.u32(ts.soc);
    w.u32(ts.fracsec);
    Ok(w)
}

pub fn encode_data_frame(f: &DataFrame, layout: &StreamLayout) -> Result<Vec<u8>, CodecError> {
    if f.blocks.is_empty() {
        return Err(CodecError::NoBlocks);
    }
    layout.check_shape(f)?;
    let size = layout.frame_size();
    let mut w = header(DATA_SYNC, size, f.idcode, f.timestamp)?;
    for (block, bl) in f.blocks.iter().zip(&layout.blocks) {
        w.u16(block.stat);
        match layout.format {
            Format::Float32 => {
                for p in &block.phasors {
                    w.f32(p.re)?;
                    w.f32(p.im)?;
                }
                w.f32(block.freq_dev)?;
                w.f32(block.rocof)?;
            }
            Format::Fixed16 => {
                for (k, p) in block.phasors.iter().enumerate() {
                    let scale = bl.scale(k);
                    w.fixed(p.re, scale)?;
                    w.fixed(p.im, scale)?;
                }
                w.fixed(block.freq_dev, 1.0)?;
                w.fixed(block.rocof, 1.0 / ROCOF_COUNTS_PER_HZ_S)?;
            }
        }
    }
    let out = w.finish();
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

/// Checks SYNC, FRAMESIZE and CHK; returns the declared frame size.
fn check_envelope(bytes: &[u8], sync: u16) -> Result<(), CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Length {
            declared: HEADER_LEN + CHK_LEN,
            actual: bytes.len(),
        });
    }
    let found = u16::from_be_bytes([bytes[0], bytes[1]]);
    if found != sync {
        return Err(CodecError::Framing { found });
    }
    let declared = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
    if declared != bytes.len() || declared < HEADER_LEN + CHK_LEN {
        return Err(CodecError::Length {
            declared,
            actual: bytes.len(),
        });
    }
    let (body, chk) = bytes.split_at(bytes.len() - CHK_LEN);
    let carried = u16::from_be_bytes([chk[0], chk[1]]);
    let computed = crc_ccitt(body);
    if carried != computed {
        return Err(CodecError::Integrity { carried, computed });
    }
    Ok(())
}

pub fn decode_data_frame(bytes: &[u8], layout: &StreamLayout) -> Result<DataFrame, CodecError> {
    check_envelope(bytes, DATA_SYNC)?;
    if layout.frame_size() != bytes.len() {
        return Err(CodecError::LayoutMismatch(format!(
            "layout expects {} bytes, frame has {}",
            layout.frame_size(),
            bytes.len()
        )));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let idcode = r.u16();
    let timestamp = Timestamp::new(r.u32(), r.u32())?;
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for bl in &layout.blocks {
        let stat = r.u16();
        let n = bl.nominal.len();
        let block = match layout.format {
            Format::Float32 => {
                let phasors = (0..n).map(|_| Phasor::new(r.f32(), r.f32())).collect();
                PmuBlock {
                    stat,
                    phasors,
                    freq_dev: r.f32(),
                    rocof: r.f32(),
                }
            }
            Format::Fixed16 => {
                let phasors = (0..n)
                    .map(|k| {
                        let s = bl.scale(k);
                        Phasor::new(
                            dequantize_fixed16(r.i16(), s),
                            dequantize_fixed16(r.i16(), s),
                        )
                    })
                    .collect();
                PmuBlock {
                    stat,
                    phasors,
                    freq_dev: f64::from(r.i16()),
                    rocof: f64::from(r.i16()) / ROCOF_COUNTS_PER_HZ_S,
                }
            }
        };
        blocks.push(block);
    }
    Ok(DataFrame {
        idcode,
        timestamp,
        blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    DataOff,
    DataOn,
}

impl Command {
    pub fn code(self) -> u16 {
        match self {
            Command::DataOff => 1,
            Command::DataOn => 2,
        }
    }

    pub fn from_code(code: u16) -> Result<Self, CodecError> {
        match code {
            1 => Ok(Command::DataOff),
            2 => Ok(Command::DataOn),
            other => Err(CodecError::UnknownCommand(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandFrame {
    pub idcode: u16,
    pub timestamp: Timestamp,
    pub command: Command,
}

pub fn encode_command(c: &CommandFrame) -> Result<Vec<u8>, CodecError> {
    let mut w = header(COMMAND_SYNC, COMMAND_FRAME_LEN, c.idcode, c.timestamp)?;
    w.u16(c.command.code());
    Ok(w.finish())
}

pub fn decode_command(bytes: &[u8]) -> Result<CommandFrame, CodecError> {
    check_envelope(bytes, COMMAND_SYNC)?;
    if bytes.len() != COMMAND_FRAME_LEN {
        return Err(CodecError::Length {
            declared: COMMAND_FRAME_LEN,
            actual: bytes.len(),
        });
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let idcode = r.u16();
    let timestamp = Timestamp::new(r.u32(), r.u32())?;
    let command = Command::from_code(r.u16())?;
    Ok(CommandFrame {
        idcode,
        timestamp,
        command,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(shape: &[usize]) -> DataFrame {
        DataFrame {
            idcode: 7,
            timestamp: Timestamp::new(1_600_000_000, 20_000).unwrap(),
            blocks: shape
                .iter()
                .map(|&n| PmuBlock {
                    stat: 0,
                    phasors: (0..n)
                        .map(|k| Phasor::new(1.0 - 0.01 * k as f64, -0.05))
                        .collect(),
                    freq_dev: 12.0,
                    rocof: 0.25,
                })
                .collect(),
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(data_frame_size(1, 6, Format::Fixed16), 46);
        assert_eq!(data_frame_size(3, 6, Format::Float32), 190);
        assert_eq!(data_frame_size(1, 0, Format::Fixed16), 22);
        assert_eq!(data_frame_size(1, 12, Format::Float32), 122);
        assert_eq!(data_frame_size(3, 12, Format::Fixed16), 178);
    }

    #[test]
    fn encoded_lengths() {
        for (shape, format, len) in [
            (vec![6], Format::Fixed16, 46),
            (vec![6, 6, 6], Format::Float32, 190),
            (vec![0], Format::Fixed16, 22),
        ] {
            let f = frame(&shape);
            let layout = StreamLayout::uniform(format, &shape, 1.0);
            let bytes = encode_data_frame(&f, &layout).unwrap();
            assert_eq!(bytes.len(), len);
            assert_eq!(usize::from(u16::from_be_bytes([bytes[2], bytes[3]])), len);
            assert_eq!(&bytes[..2], &[0xAA, 0x01]);
        }
    }

    #[test]
    fn corrupted_last_byte() {
        let layout = StreamLayout::uniform(Format::Fixed16, &[6], 1.0);
        let mut bytes = encode_data_frame(&frame(&[6]), &layout).unwrap();
        *bytes.last_mut().unwrap() ^= 0xFF;
        assert!(matches!(
            decode_data_frame(&bytes, &layout),
            Err(CodecError::Integrity { .. })
        ));
    }

    #[test]
    fn truncated_and_bad_sync() {
        let layout = StreamLayout::uniform(Format::Fixed16, &[6], 1.0);
        let bytes = encode_data_frame(&frame(&[6]), &layout).unwrap();
        assert!(matches!(
            decode_data_frame(&bytes[..10], &layout),
            Err(CodecError::Length {
                declared: 46,
                actual: 10
            })
        ));
        let mut bad = bytes.clone();
        bad[1] = 0x31;
        assert_eq!(
            decode_data_frame(&bad, &layout),
            Err(CodecError::Framing { found: 0xAA31 })
        );
    }

    #[test]
    fn wrong_layout() {
        let layout = StreamLayout::uniform(Format::Float32, &[6], 1.0);
        let bytes = encode_data_frame(&frame(&[6]), &layout).unwrap();
        let other = StreamLayout::uniform(Format::Float32, &[2, 2], 1.0);
        assert!(matches!(
            decode_data_frame(&bytes, &other),
            Err(CodecError::LayoutMismatch(_))
        ));
        assert!(matches!(
            encode_data_frame(&frame(&[3]), &layout),
            Err(CodecError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn too_large_and_empty() {
        let shape = vec![4000; 3];
        let layout = StreamLayout::uniform(Format::Float32, &shape, 1.0);
        assert!(matches!(
            encode_data_frame(&frame(&shape), &layout),
            Err(CodecError::TooLarge(_))
        ));
        let empty = DataFrame {
            blocks: vec![],
            ..frame(&[1])
        };
        assert_eq!(
            encode_data_frame(&empty, &StreamLayout::uniform(Format::Float32, &[], 1.0)),
            Err(CodecError::NoBlocks)
        );
    }

    #[test]
    fn quantization() {
        assert_eq!(quantize_fixed16(0.0, 0.37).unwrap(), 0);
        assert_eq!(quantize_fixed16(1.0, 1.0 / 10000.0).unwrap(), 10000);
        let nominal = 1.0;
        assert_eq!(
            quantize_fixed16(1.5 * nominal, fixed16_scale(nominal)).unwrap(),
            32767
        );
        assert_eq!(
            quantize_fixed16(-1.5 * nominal, fixed16_scale(nominal)).unwrap(),
            -32767
        );
        assert!(matches!(
            quantize_fixed16(1.6, fixed16_scale(1.0)),
            Err(CodecError::Overflow { .. })
        ));
    }

    #[test]
    fn commands() {
        for command in [Command::DataOn, Command::DataOff] {
            let c = CommandFrame {
                idcode: 3,
                timestamp: Timestamp::new(10, 0).unwrap(),
                command,
            };
            let bytes = encode_command(&c).unwrap();
            assert_eq!(bytes.len(), COMMAND_FRAME_LEN);
            assert_eq!(decode_command(&bytes).unwrap(), c);
        }
        let c = CommandFrame {
            idcode: 3,
            timestamp: Timestamp::default(),
            command: Command::DataOn,
        };
        let mut bytes = encode_command(&c).unwrap();
        bytes[14] = 0x00;
        bytes[15] = 0x07;
        let crc = crc_ccitt(&bytes[..16]).to_be_bytes();
        bytes[16..].copy_from_slice(&crc);
        assert_eq!(decode_command(&bytes), Err(CodecError::UnknownCommand(7)));
    }

    #[test]
    fn timestamp_micros() {
        let t = Timestamp::from_micros(1_600_000_000_980_000);
        assert_eq!(t, Timestamp::new(1_600_000_000, 980_000).unwrap());
        assert_eq!(t.as_micros(), 1_600_000_000_980_000);
        assert!(Timestamp::new(0, TIME_BASE).is_err());
    }
}
