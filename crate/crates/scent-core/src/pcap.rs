//! Classic PCAP reading and writing for 802.15.4 captures.
//!
//! Supported link types: 195 (802.15.4 with FCS) and 230 (without FCS).
//! Both standard byte orders and the nanosecond-resolution magic are accepted
//! on read; writes always use the microsecond big-picture default magic.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::codec::RawFrame;

pub const LINKTYPE_IEEE802_15_4_WITHFCS: u32 = 195;
pub const LINKTYPE_IEEE802_15_4_NOFCS: u32 = 230;

const MAGIC_MICRO: u32 = 0xa1b2c3d4;
const MAGIC_MICRO_SWAPPED: u32 = 0xd4c3b2a1;
const MAGIC_NANO: u32 = 0xa1b23c4d;
const MAGIC_NANO_SWAPPED: u32 = 0x4d3cb2a1;

pub const WRITE_SNAPLEN: u32 = 256;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("bad PCAP magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported link type {0} (need 195 or 230)")]
    UnsupportedLinkType(u32),
    #[error("truncated PCAP record at offset {0}")]
    TruncatedRecord(u64),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsResolution {
    Micro,
    Nano,
}

#[derive(Debug, Clone, Copy)]
pub struct PcapHeader {
    pub swapped: bool,
    pub linktype: u32,
    pub snaplen: u32,
    pub ts_resolution: TsResolution,
}

impl PcapHeader {
    pub fn fcs_present(&self) -> bool {
        self.linktype == LINKTYPE_IEEE802_15_4_WITHFCS
    }
}

/// Streaming PCAP reader; memory use is O(1) in file size.
pub struct PcapReader<R: Read> {
    inner: R,
    pub header: PcapHeader,
    offset: u64,
}

impl PcapReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PcapError> {
        let file = File::open(path)?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut global = [0u8; 24];
        inner.read_exact(&mut global)?;
        let magic = u32::from_le_bytes(global[0..4].try_into().unwrap());
        let (swapped, ts_resolution) = match magic {
            MAGIC_MICRO => (false, TsResolution::Micro),
            MAGIC_MICRO_SWAPPED => (true, TsResolution::Micro),
            MAGIC_NANO => (false, TsResolution::Nano),
            MAGIC_NANO_SWAPPED => (true, TsResolution::Nano),
            other => return Err(PcapError::BadMagic(other)),
        };
        let u32_at = |buf: &[u8; 24], at: usize| {
            let b: [u8; 4] = buf[at..at + 4].try_into().unwrap();
            if swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let snaplen = u32_at(&global, 16);
        let linktype = u32_at(&global, 20);
        if linktype != LINKTYPE_IEEE802_15_4_WITHFCS && linktype != LINKTYPE_IEEE802_15_4_NOFCS {
            return Err(PcapError::UnsupportedLinkType(linktype));
        }
        Ok(PcapReader {
            inner,
            header: PcapHeader {
                swapped,
                linktype,
                snaplen,
                ts_resolution,
            },
            offset: 24,
        })
    }

    /// Next frame, `Ok(None)` at clean EOF.
    pub fn next_frame(&mut self) -> Result<Option<RawFrame>, PcapError> {
        let mut rec = [0u8; 16];
        match self.inner.read(&mut rec[..1])? {
            0 => return Ok(None),
            _ => {}
        }
        self.inner
            .read_exact(&mut rec[1..])
            .map_err(|_| PcapError::TruncatedRecord(self.offset))?;
        let u32_at = |at: usize| {
            let b: [u8; 4] = rec[at..at + 4].try_into().unwrap();
            if self.header.swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let ts_sec = u32_at(0) as u64;
        let ts_frac = u32_at(4) as u64;
        let incl_len = u32_at(8) as usize;
        let ts_us = match self.header.ts_resolution {
            TsResolution::Micro => ts_sec * 1_000_000 + ts_frac,
            TsResolution::Nano => ts_sec * 1_000_000 + ts_frac / 1000,
        };
        let mut bytes = vec![0u8; incl_len];
        self.inner
            .read_exact(&mut bytes)
            .map_err(|_| PcapError::TruncatedRecord(self.offset))?;
        self.offset += 16 + incl_len as u64;
        Ok(Some(RawFrame::new(bytes, ts_us)))
    }

    pub fn fcs_present(&self) -> bool {
        self.header.fcs_present()
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<RawFrame, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// Read an entire PCAP file into memory; convenience over the streaming reader.
pub fn read_pcap(path: impl AsRef<Path>) -> Result<(PcapHeader, Vec<RawFrame>), PcapError> {
    let mut reader = PcapReader::open(path)?;
    let mut frames = Vec::new();
    while let Some(f) = reader.next_frame()? {
        frames.push(f);
    }
    Ok((reader.header, frames))
}

/// PCAP writer: standard global header, one record per frame, flushed on close.
pub struct PcapWriter<W: Write> {
    inner: W,
    count: u64,
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, with_fcs: bool) -> Result<Self, PcapError> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file), with_fcs)
    }
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, with_fcs: bool) -> Result<Self, PcapError> {
        let linktype = if with_fcs {
            LINKTYPE_IEEE802_15_4_WITHFCS
        } else {
            LINKTYPE_IEEE802_15_4_NOFCS
        };
        inner.write_all(&MAGIC_MICRO.to_le_bytes())?;
        inner.write_all(&2u16.to_le_bytes())?; // version 2.4
        inner.write_all(&4u16.to_le_bytes())?;
        inner.write_all(&0i32.to_le_bytes())?; // thiszone
        inner.write_all(&0u32.to_le_bytes())?; // sigfigs
        inner.write_all(&WRITE_SNAPLEN.to_le_bytes())?;
        inner.write_all(&linktype.to_le_bytes())?;
        Ok(PcapWriter { inner, count: 0 })
    }

    pub fn write_frame(&mut self, frame: &RawFrame) -> Result<(), PcapError> {
        let sec = (frame.ts_us / 1_000_000) as u32;
        let usec = (frame.ts_us % 1_000_000) as u32;
        let len = frame.bytes.len() as u32;
        self.inner.write_all(&sec.to_le_bytes())?;
        self.inner.write_all(&usec.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(&frame.bytes)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<u64, PcapError> {
        self.inner.flush()?;
        Ok(self.count)
    }
}

/// Write all `frames` to `path`; returns the number written.
pub fn write_pcap<'a>(
    path: impl AsRef<Path>,
    frames: impl IntoIterator<Item = &'a RawFrame>,
    with_fcs: bool,
) -> Result<u64, PcapError> {
    let mut w = PcapWriter::create(path, with_fcs)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames() -> Vec<RawFrame> {
        vec![
            RawFrame::new(vec![1; 5], 1_000_000),
            RawFrame::new(vec![2; 10], 1_500_000),
            RawFrame::new(vec![3; 127], 2_000_001),
        ]
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pcap");
        let n = write_pcap(&path, &frames(), true).unwrap();
        assert_eq!(n, 3);
        let (hdr, read) = read_pcap(&path).unwrap();
        assert!(hdr.fcs_present());
        assert_eq!(read, frames());
    }

    #[test]
    fn empty_file_is_24_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pcap");
        let n = write_pcap(&path, &[], false).unwrap();
        assert_eq!(n, 0);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
        let (_, read) = read_pcap(&path).unwrap();
        assert!(read.is_empty());
    }

    #[test]
    fn file_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pcap");
        write_pcap(&path, &frames(), true).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            24 + 3 * 16 + (5 + 10 + 127)
        );
    }

    #[test]
    fn unsupported_linktype_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC_MICRO.to_le_bytes());
        buf.extend_from_slice(&[2, 0, 4, 0]);
        buf.extend_from_slice(&[0; 16]);
        buf[20..24].copy_from_slice(&105u32.to_le_bytes()); // Wi-Fi
        assert!(matches!(
            PcapReader::new(buf.as_slice()),
            Err(PcapError::UnsupportedLinkType(105))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = [0u8; 24];
        assert!(matches!(
            PcapReader::new(buf.as_slice()),
            Err(PcapError::BadMagic(0))
        ));
    }

    #[test]
    fn swapped_magic_parses() {
        // Construct a big-endian file by hand.
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC_MICRO.to_be_bytes());
        buf.extend_from_slice(&2u16.to_be_bytes());
        buf.extend_from_slice(&4u16.to_be_bytes());
        buf.extend_from_slice(&0u32.to_be_bytes());
        buf.extend_from_slice(&0u32.to_be_bytes());
        buf.extend_from_slice(&256u32.to_be_bytes());
        buf.extend_from_slice(&195u32.to_be_bytes());
        buf.extend_from_slice(&3u32.to_be_bytes()); // ts_sec
        buf.extend_from_slice(&7u32.to_be_bytes()); // ts_usec
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&[0xAA, 0xBB]);
        let mut r = PcapReader::new(buf.as_slice()).unwrap();
        assert!(r.header.swapped);
        let f = r.next_frame().unwrap().unwrap();
        assert_eq!(f.ts_us, 3_000_007);
        assert_eq!(f.bytes, vec![0xAA, 0xBB]);
        assert!(r.next_frame().unwrap().is_none());
    }

    #[test]
    fn truncated_record_reports_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pcap");
        write_pcap(&path, &frames(), true).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = &full[..full.len() - 3];
        let mut r = PcapReader::new(cut).unwrap();
        assert!(r.next_frame().unwrap().is_some());
        assert!(r.next_frame().unwrap().is_some());
        assert!(matches!(r.next_frame(), Err(PcapError::TruncatedRecord(_))));
    }
}
