//! Per-device, time-windowed traffic features.
//!
//! Three feature components are tracked per device and direction: packet
//! size, payload length and inter-arrival time. Mean and standard deviation
//! are computed online with Welford's recurrence, so a window is processed in
//! a single pass with O(devices) memory.
//!
//! Packet size includes the 2-byte FCS when present in the capture; the
//! emitted CSV records that choice in its leading comment line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::codec::{Addr, Dissected, MacFrame};
use crate::pcap::{PcapError, PcapReader};

/// Online mean / sum-of-squared-deviations accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn update(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Undefined (None) until the first sample.
    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then_some(self.mean)
    }

    /// Sample standard deviation; 0 for a single sample, undefined for none.
    pub fn std(&self) -> Option<f64> {
        match self.n {
            0 => None,
            1 => Some(0.0),
            n => Some((self.m2 / (n - 1) as f64).sqrt()),
        }
    }
}

/// Per-direction accumulators for one device within one window.
#[derive(Debug, Clone, Default)]
pub struct DirectionalStats {
    pub pkt_len: Moments,
    pub payload_len: Moments,
    pub iat: Moments,
    last_ts_us: Option<u64>,
}

impl DirectionalStats {
    fn ingest(&mut self, ts_us: u64, pkt_len: f64, payload_len: f64) {
        self.pkt_len.update(pkt_len);
        self.payload_len.update(payload_len);
        if let Some(prev) = self.last_ts_us {
            self.iat.update((ts_us.saturating_sub(prev)) as f64 / 1e6);
        }
        self.last_ts_us = Some(ts_us);
    }
}

/// Frame direction relative to one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Outgoing,
    Incoming,
    Unrelated,
}

/// Direction of `frame` relative to `device`.
///
/// Broadcast destinations count as outgoing for the source but incoming for
/// no one, so one broadcast never inflates every device's incoming stats.
pub fn classify_direction(frame: &MacFrame, device: &Addr) -> Direction {
    if frame.src_addr.as_ref() == Some(device) {
        return Direction::Outgoing;
    }
    match &frame.dst_addr {
        Some(dst) if dst == device && !dst.is_broadcast() => Direction::Incoming,
        _ => Direction::Unrelated,
    }
}

pub const STAT_COLUMN_COUNT: usize = 18;

/// The 18 statistic columns, in CSV order.
pub const STAT_COLUMNS: [&str; STAT_COLUMN_COUNT] = [
    "mean_pkt_len_all",
    "std_pkt_len_all",
    "mean_payload_len_all",
    "std_payload_len_all",
    "mean_iat_all",
    "std_iat_all",
    "mean_pkt_len_in",
    "std_pkt_len_in",
    "mean_payload_len_in",
    "std_payload_len_in",
    "mean_iat_in",
    "std_iat_in",
    "mean_pkt_len_out",
    "std_pkt_len_out",
    "mean_payload_len_out",
    "std_payload_len_out",
    "mean_iat_out",
    "std_iat_out",
];

/// Window configuration: duration, selected stat columns, direction split.
#[derive(Debug, Clone)]
pub struct WindowConfig {
    pub duration_s: f64,
    /// Selected stat columns; unselected ones serialize as empty fields.
    pub selected: [bool; STAT_COLUMN_COUNT],
    pub direction_split: bool,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("window duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("selected feature set is empty")]
    EmptySelection,
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("malformed CSV at line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
}

impl WindowConfig {
    pub fn new(duration_s: f64) -> Result<Self, FeatureError> {
        if !(duration_s > 0.0) {
            return Err(FeatureError::BadDuration(duration_s));
        }
        Ok(WindowConfig {
            duration_s,
            selected: [true; STAT_COLUMN_COUNT],
            direction_split: true,
        })
    }

    /// Keep only the named columns. Unknown names are ignored.
    pub fn select(mut self, names: &[&str]) -> Result<Self, FeatureError> {
        self.selected = [false; STAT_COLUMN_COUNT];
        for name in names {
            if let Some(i) = STAT_COLUMNS.iter().position(|c| c == name) {
                self.selected[i] = true;
            }
        }
        if !self.selected.iter().any(|s| *s) {
            return Err(FeatureError::EmptySelection);
        }
        Ok(self)
    }

    fn duration_us(&self) -> u64 {
        (self.duration_s * 1e6).round() as u64
    }
}

/// One emitted row: a device's statistics over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub device: String,
    pub pan_id: Option<u16>,
    pub n_total: u64,
    pub n_in: u64,
    pub n_out: u64,
    /// Values for [`STAT_COLUMNS`]; `None` serializes as an empty field.
    pub stats: [Option<f64>; STAT_COLUMN_COUNT],
    pub truncated: bool,
}

#[derive(Debug, Clone, Default)]
struct DeviceWindow {
    all: DirectionalStats,
    incoming: DirectionalStats,
    outgoing: DirectionalStats,
    pan_id: Option<u16>,
}

impl DeviceWindow {
    fn to_row(&self, cfg: &WindowConfig, start_us: u64, end_us: u64, device: &str) -> FeatureRow {
        let dirs = [&self.all, &self.incoming, &self.outgoing];
        let mut stats = [None; STAT_COLUMN_COUNT];
        for (d, dir) in dirs.iter().enumerate() {
            if d > 0 && !cfg.direction_split {
                continue;
            }
            let pairs = [
                (dir.pkt_len.mean(), dir.pkt_len.std()),
                (dir.payload_len.mean(), dir.payload_len.std()),
                // IAT undefined until a direction has two frames
                (
                    dir.iat.mean(),
                    (dir.iat.n >= 1).then(|| dir.iat.std().unwrap()),
                ),
            ];
            for (m, (mean, std)) in pairs.iter().enumerate() {
                let base = d * 6 + m * 2;
                if cfg.selected[base] {
                    stats[base] = *mean;
                }
                if cfg.selected[base + 1] {
                    stats[base + 1] = *std;
                }
            }
        }
        FeatureRow {
            window_start_us: start_us,
            window_end_us: end_us,
            device: device.to_string(),
            pan_id: self.pan_id,
            n_total: self.all.pkt_len.n,
            n_in: self.incoming.pkt_len.n,
            n_out: self.outgoing.pkt_len.n,
            stats,
            truncated: false,
        }
    }
}

/// Device key: short address when present, else extended, lowercase hex.
pub fn device_key(addr: &Addr) -> String {
    addr.to_string()
}

/// Single-pass windowing engine. One instance per capture task; no shared
/// mutable state between tasks.
#[derive(Debug)]
pub struct WindowAggregator {
    cfg: WindowConfig,
    window_start_us: Option<u64>,
    devices: BTreeMap<String, DeviceWindow>,
    late_frames: u64,
}

impl WindowAggregator {
    pub fn new(cfg: WindowConfig) -> Self {
        WindowAggregator {
            cfg,
            window_start_us: None,
            devices: BTreeMap::new(),
            late_frames: 0,
        }
    }

    pub fn late_frames(&self) -> u64 {
        self.late_frames
    }

    /// Feed one dissected frame; returns rows for any windows that closed.
    ///
    /// Windows are aligned to the first frame's timestamp. A frame older than
    /// the current window is counted as late and dropped.
    pub fn ingest(&mut self, frame: &Dissected) -> Vec<FeatureRow> {
        let ts = frame.raw.ts_us;
        let start = *self.window_start_us.get_or_insert(ts);
        if ts < start {
            self.late_frames += 1;
            return Vec::new();
        }
        let dur = self.cfg.duration_us();
        let mut out = Vec::new();
        let mut start = start;
        while ts >= start + dur {
            out.extend(self.close_window(start, start + dur, false));
            start += dur;
        }
        self.window_start_us = Some(start);

        let Some(mac) = frame.mac.as_ref() else {
            return out;
        };
        let pkt_len = frame.raw.bytes.len() as f64;
        let payload_len = mac.payload.len() as f64;
        let pan = mac.dst_pan.or(mac.src_pan);

        if let Some(src) = &mac.src_addr {
            let dev = self.devices.entry(device_key(src)).or_default();
            dev.pan_id = dev.pan_id.or(pan);
            dev.all.ingest(ts, pkt_len, payload_len);
            dev.outgoing.ingest(ts, pkt_len, payload_len);
        }
        if let Some(dst) = &mac.dst_addr {
            if !dst.is_broadcast() && mac.src_addr.as_ref() != Some(dst) {
                let dev = self.devices.entry(device_key(dst)).or_default();
                dev.pan_id = dev.pan_id.or(pan);
                dev.all.ingest(ts, pkt_len, payload_len);
                dev.incoming.ingest(ts, pkt_len, payload_len);
            }
        }
        out
    }

    fn close_window(&mut self, start: u64, end: u64, truncated: bool) -> Vec<FeatureRow> {
        let devices = std::mem::take(&mut self.devices);
        devices
            .iter()
            .map(|(key, dev)| {
                let mut row = dev.to_row(&self.cfg, start, end, key);
                row.truncated = truncated;
                row
            })
            .collect()
    }

    /// Flush the current partial window, marking its rows truncated.
    pub fn finalize(&mut self) -> Vec<FeatureRow> {
        match self.window_start_us {
            Some(start) if !self.devices.is_empty() => {
                let end = start + self.cfg.duration_us();
                self.close_window(start, end, true)
            }
            _ => Vec::new(),
        }
    }
}

/// Offline feature extraction: identical output to live ingestion of the
/// same frames.
pub fn extract_from_pcap(
    path: impl AsRef<Path>,
    cfg: WindowConfig,
) -> Result<Vec<FeatureRow>, FeatureError> {
    let mut reader = PcapReader::open(path)?;
    let fcs = reader.fcs_present();
    let mut agg = WindowAggregator::new(cfg);
    let mut rows = Vec::new();
    while let Some(raw) = reader.next_frame()? {
        rows.extend(agg.ingest(&Dissected::dissect(raw, fcs)));
    }
    rows.extend(agg.finalize());
    Ok(rows)
}

pub const CSV_COMMENT: &str = "# pkt_len includes FCS bytes when present in the capture";

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Fixed CSV header (after the comment line).
pub fn csv_header() -> String {
    let mut cols = vec![
        "window_start_us",
        "window_end_us",
        "device",
        "pan_id",
        "n_total",
        "n_in",
        "n_out",
    ];
    cols.extend(STAT_COLUMNS);
    cols.push("truncated");
    cols.join(",")
}

fn format_row(row: &FeatureRow) -> String {
    let mut fields: Vec<String> = vec![
        row.window_start_us.to_string(),
        row.window_end_us.to_string(),
        csv_escape(&row.device),
        row.pan_id.map(|p| format!("0x{p:04x}")).unwrap_or_default(),
        row.n_total.to_string(),
        row.n_in.to_string(),
        row.n_out.to_string(),
    ];
    for stat in &row.stats {
        fields.push(stat.map(|v| v.to_string()).unwrap_or_default());
    }
    fields.push(if row.truncated { "1" } else { "0" }.to_string());
    fields.join(",")
}

/// Streaming CSV sink; header written at creation, flushed on finish.
pub struct CsvSink<W: Write> {
    inner: W,
    count: u64,
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file))
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut inner: W) -> Result<Self, FeatureError> {
        writeln!(inner, "{CSV_COMMENT}")?;
        writeln!(inner, "{}", csv_header())?;
        inner.flush()?;
        Ok(CsvSink { inner, count: 0 })
    }

    pub fn write_row(&mut self, row: &FeatureRow) -> Result<(), FeatureError> {
        writeln!(self.inner, "{}", format_row(row))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64, FeatureError> {
        self.inner.flush()?;
        Ok(self.count)
    }
}

/// Write `rows` to `path`; returns the number of rows written.
pub fn write_feature_csv(rows: &[FeatureRow], path: impl AsRef<Path>) -> Result<u64, FeatureError> {
    let mut sink = CsvSink::create(path)?;
    for row in rows {
        sink.write_row(row)?;
    }
    sink.finish()
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if cur.is_empty() => quoted = true,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Re-parse a feature CSV produced by [`write_feature_csv`].
pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>, FeatureError> {
    let file = File::open(path)?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let fields = split_csv_line(&line);
        if fields.len() != 7 + STAT_COLUMN_COUNT + 1 {
            return Err(FeatureError::BadCsv {
                line: idx + 1,
                reason: format!(
                    "expected {} fields, got {}",
                    8 + STAT_COLUMN_COUNT,
                    fields.len()
                ),
            });
        }
        let num = |s: &str| -> Result<u64, FeatureError> {
            s.parse().map_err(|_| FeatureError::BadCsv {
                line: idx + 1,
                reason: format!("bad integer `{s}`"),
            })
        };
        let mut stats = [None; STAT_COLUMN_COUNT];
        for (i, s) in fields[7..7 + STAT_COLUMN_COUNT].iter().enumerate() {
            if !s.is_empty() {
                stats[i] = Some(s.parse().map_err(|_| FeatureError::BadCsv {
                    line: idx + 1,
                    reason: format!("bad real `{s}`"),
                })?);
            }
        }
        rows.push(FeatureRow {
            window_start_us: num(&fields[0])?,
            window_end_us: num(&fields[1])?,
            device: fields[2].clone(),
            pan_id: if fields[3].is_empty() {
                None
            } else {
                u16::from_str_radix(fields[3].trim_start_matches("0x"), 16).ok()
            },
            n_total: num(&fields[4])?,
            n_in: num(&fields[5])?,
            n_out: num(&fields[6])?,
            stats,
            truncated: fields[7 + STAT_COLUMN_COUNT] == "1",
        });
    }
    Ok(rows)
}
