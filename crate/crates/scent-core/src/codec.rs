//! IEEE 802.15.4 MAC frame dissection and serialization, plus best-effort
//! Zigbee network-layer header parsing.
//!
//! All operations here are pure functions over immutable inputs and can be
//! called from any number of threads.

use std::fmt;

use thiserror::Error;

/// Maximum PSDU length carried by an 802.15.4 PHY packet.
pub const MAX_PSDU_LEN: usize = 127;

/// Broadcast short address.
pub const BROADCAST_SHORT: u16 = 0xFFFF;

/// A raw captured frame: PSDU bytes plus capture metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub bytes: Vec<u8>,
    /// Capture timestamp, microseconds.
    pub ts_us: u64,
    pub channel: Option<u8>,
    pub rssi: Option<i8>,
}

impl RawFrame {
    pub fn new(bytes: Vec<u8>, ts_us: u64) -> Self {
        RawFrame {
            bytes,
            ts_us,
            channel: None,
            rssi: None,
        }
    }
}

/// MAC frame type, from the three low bits of the frame control field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Beacon,
    Data,
    Ack,
    MacCommand,
    Reserved(u8),
}

impl FrameType {
    pub fn from_bits(bits: u8) -> Self {
        match bits & 0x7 {
            0 => FrameType::Beacon,
            1 => FrameType::Data,
            2 => FrameType::Ack,
            3 => FrameType::MacCommand,
            b => FrameType::Reserved(b),
        }
    }

    pub fn to_bits(self) -> u8 {
        match self {
            FrameType::Beacon => 0,
            FrameType::Data => 1,
            FrameType::Ack => 2,
            FrameType::MacCommand => 3,
            FrameType::Reserved(b) => b & 0x7,
        }
    }
}

/// A device address as carried in the MAC addressing fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Addr {
    Short(u16),
    Extended(u64),
}

impl Addr {
    pub fn is_broadcast(&self) -> bool {
        matches!(self, Addr::Short(BROADCAST_SHORT))
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Short(a) => write!(f, "0x{a:04x}"),
            Addr::Extended(a) => write!(f, "0x{a:016x}"),
        }
    }
}

/// FCS verification outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcsStatus {
    Valid,
    Invalid,
    Absent,
}

/// A fully decomposed MAC frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacFrame {
    pub frame_type: FrameType,
    pub security_enabled: bool,
    pub frame_pending: bool,
    pub ack_request: bool,
    pub panid_compression: bool,
    pub frame_version: u8,
    pub seq_no: u8,
    pub dst_pan: Option<u16>,
    pub dst_addr: Option<Addr>,
    pub src_pan: Option<u16>,
    pub src_addr: Option<Addr>,
    pub payload: Vec<u8>,
    pub fcs: Option<u16>,
    pub fcs_ok: FcsStatus,
}

impl MacFrame {
    /// Minimal Data frame used by generators and tests.
    pub fn data(seq_no: u8, dst_pan: u16, dst: Addr, src: Addr, payload: Vec<u8>) -> Self {
        MacFrame {
            frame_type: FrameType::Data,
            security_enabled: false,
            frame_pending: false,
            ack_request: false,
            panid_compression: true,
            frame_version: 0,
            seq_no,
            dst_pan: Some(dst_pan),
            dst_addr: Some(dst),
            src_pan: None,
            src_addr: Some(src),
            payload,
            fcs: None,
            fcs_ok: FcsStatus::Absent,
        }
    }

    /// Immediate acknowledgement frame (no addressing fields).
    pub fn ack(seq_no: u8) -> Self {
        MacFrame {
            frame_type: FrameType::Ack,
            security_enabled: false,
            frame_pending: false,
            ack_request: false,
            panid_compression: false,
            frame_version: 0,
            seq_no,
            dst_pan: None,
            dst_addr: None,
            src_pan: None,
            src_addr: None,
            payload: Vec::new(),
            fcs: None,
            fcs_ok: FcsStatus::Absent,
        }
    }
}

/// Zigbee network-layer header (fixed part only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NwkHeader {
    pub frame_type: NwkFrameType,
    pub protocol_version: u8,
    pub discover_route: u8,
    pub security: bool,
    pub dst: u16,
    pub src: u16,
    pub radius: u8,
    pub seq_no: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NwkFrameType {
    NwkData,
    NwkCommand,
    Reserved(u8),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("frame truncated: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("reserved addressing mode bits (01) in frame control field")]
    ReservedAddressingMode,
    #[error("inconsistent addressing fields: {0}")]
    InconsistentAddressing(String),
}

// CRC-16 with reversed polynomial 0x1021 (KERMIT), zero init, no final xor.
// This is the 802.15.4 frame check sequence.
const FCS_POLY_REFLECTED: u16 = 0x8408;

fn fcs_table() -> &'static [u16; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u16; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u16; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut crc = i as u16;
            for _ in 0..8 {
                crc = if crc & 1 != 0 {
                    (crc >> 1) ^ FCS_POLY_REFLECTED
                } else {
                    crc >> 1
                };
            }
            *entry = crc;
        }
        table
    })
}

/// Compute the 16-bit frame check sequence over `data`.
///
/// Matches what a conformant transmitter appends, little-endian on the wire.
pub fn compute_fcs(data: &[u8]) -> u16 {
    let table = fcs_table();
    let mut crc: u16 = 0;
    for &b in data {
        let idx = ((crc ^ b as u16) & 0xFF) as usize;
        crc = (crc >> 8) ^ table[idx];
    }
    crc
}

/// Check the trailing two bytes of `psdu` against the FCS of the rest.
pub fn verify_fcs(psdu: &[u8]) -> FcsStatus {
    if psdu.len() < 2 {
        return FcsStatus::Absent;
    }
    let (body, tail) = psdu.split_at(psdu.len() - 2);
    let wire = u16::from_le_bytes([tail[0], tail[1]]);
    if compute_fcs(body) == wire {
        FcsStatus::Valid
    } else {
        FcsStatus::Invalid
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.data.len() {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.data.len() - self.pos,
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16_le(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u64_le(&mut self) -> Result<u64, CodecError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AddrMode {
    None,
    Short,
    Extended,
}

fn addr_mode(bits: u16) -> Result<AddrMode, CodecError> {
    match bits & 0x3 {
        0 => Ok(AddrMode::None),
        1 => Err(CodecError::ReservedAddressingMode),
        2 => Ok(AddrMode::Short),
        3 => Ok(AddrMode::Extended),
        _ => unreachable!(),
    }
}

/// Parse a PSDU into a [`MacFrame`].
///
/// Addressing rules follow frame versions 0/1; version >= 2 frames are parsed
/// with the same rules, the version number is preserved for callers to flag.
pub fn parse_mac_frame(raw: &RawFrame, fcs_present: bool) -> Result<MacFrame, CodecError> {
    let (body, fcs, fcs_ok) = if fcs_present {
        if raw.bytes.len() < 4 {
            return Err(CodecError::Truncated {
                offset: 0,
                needed: 4,
                available: raw.bytes.len(),
            });
        }
        let (body, tail) = raw.bytes.split_at(raw.bytes.len() - 2);
        let wire = u16::from_le_bytes([tail[0], tail[1]]);
        let status = if compute_fcs(body) == wire {
            FcsStatus::Valid
        } else {
            FcsStatus::Invalid
        };
        (body, Some(wire), status)
    } else {
        (raw.bytes.as_slice(), None, FcsStatus::Absent)
    };

    let mut r = Reader::new(body);
    let fcf = r.u16_le()?;
    let frame_type = FrameType::from_bits((fcf & 0x7) as u8);
    let security_enabled = fcf & 0x0008 != 0;
    let frame_pending = fcf & 0x0010 != 0;
    let ack_request = fcf & 0x0020 != 0;
    let panid_compression = fcf & 0x0040 != 0;
    let dst_mode = addr_mode(fcf >> 10)?;
    let frame_version = ((fcf >> 12) & 0x3) as u8;
    let src_mode = addr_mode(fcf >> 14)?;
    let seq_no = r.u8()?;

    let dst_pan = if dst_mode != AddrMode::None {
        Some(r.u16_le()?)
    } else {
        None
    };
    let dst_addr = match dst_mode {
        AddrMode::None => None,
        AddrMode::Short => Some(Addr::Short(r.u16_le()?)),
        AddrMode::Extended => Some(Addr::Extended(r.u64_le()?)),
    };
    let src_pan = if src_mode != AddrMode::None && !panid_compression {
        Some(r.u16_le()?)
    } else {
        None
    };
    let src_addr = match src_mode {
        AddrMode::None => None,
        AddrMode::Short => Some(Addr::Short(r.u16_le()?)),
        AddrMode::Extended => Some(Addr::Extended(r.u64_le()?)),
    };

    let payload = body[r.pos..].to_vec();

    Ok(MacFrame {
        frame_type,
        security_enabled,
        frame_pending,
        ack_request,
        panid_compression,
        frame_version,
        seq_no,
        dst_pan,
        dst_addr,
        src_pan,
        src_addr,
        payload,
        fcs,
        fcs_ok,
    })
}

fn mode_of(addr: Option<&Addr>) -> AddrMode {
    match addr {
        None => AddrMode::None,
        Some(Addr::Short(_)) => AddrMode::Short,
        Some(Addr::Extended(_)) => AddrMode::Extended,
    }
}

fn mode_bits(mode: AddrMode) -> u16 {
    match mode {
        AddrMode::None => 0,
        AddrMode::Short => 2,
        AddrMode::Extended => 3,
    }
}

/// Serialize a [`MacFrame`] back to PSDU bytes.
///
/// `parse_mac_frame(serialize_mac_frame(f))` reproduces `f` field for field.
pub fn serialize_mac_frame(frame: &MacFrame, append_fcs: bool) -> Result<Vec<u8>, CodecError> {
    let dst_mode = mode_of(frame.dst_addr.as_ref());
    let src_mode = mode_of(frame.src_addr.as_ref());

    if frame.dst_addr.is_some() && frame.dst_pan.is_none() {
        return Err(CodecError::InconsistentAddressing(
            "destination address without destination PAN id".into(),
        ));
    }
    if frame.dst_addr.is_none() && frame.dst_pan.is_some() {
        return Err(CodecError::InconsistentAddressing(
            "destination PAN id without destination address".into(),
        ));
    }
    if frame.src_addr.is_none() && frame.src_pan.is_some() {
        return Err(CodecError::InconsistentAddressing(
            "source PAN id without source address".into(),
        ));
    }
    if frame.panid_compression {
        if frame.dst_pan.is_none() {
            return Err(CodecError::InconsistentAddressing(
                "PAN id compression requires a destination PAN id".into(),
            ));
        }
        if frame.src_pan.is_some() {
            return Err(CodecError::InconsistentAddressing(
                "PAN id compression forbids an explicit source PAN id".into(),
            ));
        }
    } else if frame.src_addr.is_some() && frame.src_pan.is_none() {
        return Err(CodecError::InconsistentAddressing(
            "source address without source PAN id (and no compression)".into(),
        ));
    }

    let fcf: u16 = frame.frame_type.to_bits() as u16
        | (frame.security_enabled as u16) << 3
        | (frame.frame_pending as u16) << 4
        | (frame.ack_request as u16) << 5
        | (frame.panid_compression as u16) << 6
        | mode_bits(dst_mode) << 10
        | ((frame.frame_version & 0x3) as u16) << 12
        | mode_bits(src_mode) << 14;

    let mut out = Vec::with_capacity(MAX_PSDU_LEN);
    out.extend_from_slice(&fcf.to_le_bytes());
    out.push(frame.seq_no);
    if let Some(pan) = frame.dst_pan {
        out.extend_from_slice(&pan.to_le_bytes());
    }
    match frame.dst_addr {
        None => {}
        Some(Addr::Short(a)) => out.extend_from_slice(&a.to_le_bytes()),
        Some(Addr::Extended(a)) => out.extend_from_slice(&a.to_le_bytes()),
    }
    if let Some(pan) = frame.src_pan {
        out.extend_from_slice(&pan.to_le_bytes());
    }
    match frame.src_addr {
        None => {}
        Some(Addr::Short(a)) => out.extend_from_slice(&a.to_le_bytes()),
        Some(Addr::Extended(a)) => out.extend_from_slice(&a.to_le_bytes()),
    }
    out.extend_from_slice(&frame.payload);
    if append_fcs {
        let fcs = compute_fcs(&out);
        out.extend_from_slice(&fcs.to_le_bytes());
    }
    Ok(out)
}

const NWK_FIXED_HEADER_LEN: usize = 8;

/// Best-effort Zigbee NWK header parse over the MAC payload.
///
/// Returns `None` for non-Data frames or payloads shorter than the fixed
/// header; never fails on garbage payloads.
pub fn parse_nwk_header(mac: &MacFrame) -> Option<NwkHeader> {
    if mac.frame_type != FrameType::Data || mac.payload.len() < NWK_FIXED_HEADER_LEN {
        return None;
    }
    let p = &mac.payload;
    let fcf = u16::from_le_bytes([p[0], p[1]]);
    let frame_type = match fcf & 0x3 {
        0 => NwkFrameType::NwkData,
        1 => NwkFrameType::NwkCommand,
        b => NwkFrameType::Reserved(b as u8),
    };
    Some(NwkHeader {
        frame_type,
        protocol_version: ((fcf >> 2) & 0xF) as u8,
        discover_route: ((fcf >> 6) & 0x3) as u8,
        security: fcf & 0x0200 != 0,
        dst: u16::from_le_bytes([p[2], p[3]]),
        src: u16::from_le_bytes([p[4], p[5]]),
        radius: p[6],
        seq_no: p[7],
    })
}

/// A frame dissected once, shared between capture tasks.
#[derive(Debug, Clone)]
pub struct Dissected {
    pub raw: RawFrame,
    pub mac: Option<MacFrame>,
    pub nwk: Option<NwkHeader>,
}

impl Dissected {
    pub fn dissect(raw: RawFrame, fcs_present: bool) -> Self {
        let mac = parse_mac_frame(&raw, fcs_present).ok();
        let nwk = mac.as_ref().and_then(parse_nwk_header);
        Dissected { raw, mac, nwk }
    }
}
