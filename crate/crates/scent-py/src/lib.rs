//! Python bindings for the 802.15.4 capture toolkit.
//!
//! Structured results (parsed frames, evaluation reports) cross the boundary
//! as plain dicts and lists; larger reports are returned as JSON strings so
//! callers can `json.loads` them.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use scent_core::codec::{
    compute_fcs, parse_mac_frame, serialize_mac_frame, verify_fcs, Addr, Dissected, FcsStatus,
    RawFrame,
};
use scent_core::features::{extract_from_pcap, write_feature_csv, WindowConfig};
use scent_core::filter::{eval_filter, parse_filter};
use scent_core::ident::cv::combined_report;
use scent_core::ident::{
    feature_importance, kfold_cv, load_and_clean, train_forest, ForestParams, ModelSpec, TreeParams,
};
use scent_core::pcap::{read_pcap, PcapWriter};
use scent_core::pipeline::{default_scenario, generate_scenario};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn addr_repr(addr: &Addr) -> String {
    addr.to_string()
}

/// CRC-16 FCS over `data`, as appended to transmitted frames.
#[pyfunction]
fn fcs(data: &[u8]) -> u16 {
    compute_fcs(data)
}

/// Check the trailing 2-byte FCS of a PSDU: "valid", "invalid", or "absent".
#[pyfunction]
fn fcs_status(psdu: &[u8]) -> &'static str {
    match verify_fcs(psdu) {
        FcsStatus::Valid => "valid",
        FcsStatus::Invalid => "invalid",
        FcsStatus::Absent => "absent",
    }
}

/// Parse one MAC frame into a dict; raises ValueError on malformed input.
#[pyfunction]
#[pyo3(signature = (psdu, fcs_present=true, ts_us=0))]
fn parse_frame(py: Python<'_>, psdu: &[u8], fcs_present: bool, ts_us: u64) -> PyResult<PyObject> {
    let raw = RawFrame::new(psdu.to_vec(), ts_us);
    let mac = parse_mac_frame(&raw, fcs_present).map_err(value_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("frame_type", format!("{:?}", mac.frame_type).to_lowercase())?;
    d.set_item("seq_no", mac.seq_no)?;
    d.set_item("ack_request", mac.ack_request)?;
    d.set_item("panid_compression", mac.panid_compression)?;
    d.set_item("dst_pan", mac.dst_pan)?;
    d.set_item("src_pan", mac.src_pan)?;
    d.set_item("dst", mac.dst_addr.as_ref().map(addr_repr))?;
    d.set_item("src", mac.src_addr.as_ref().map(addr_repr))?;
    d.set_item("payload", PyBytes::new_bound(py, &mac.payload))?;
    d.set_item(
        "fcs_status",
        match mac.fcs_ok {
            FcsStatus::Valid => "valid",
            FcsStatus::Invalid => "invalid",
            FcsStatus::Absent => "absent",
        },
    )?;
    let nwk = Dissected::dissect(raw, fcs_present).nwk.map(|n| {
        let nd = PyDict::new_bound(py);
        let _ = nd.set_item("frame_type", format!("{:?}", n.frame_type).to_lowercase());
        let _ = nd.set_item("dst", n.dst);
        let _ = nd.set_item("src", n.src);
        let _ = nd.set_item("radius", n.radius);
        let _ = nd.set_item("seq_no", n.seq_no);
        nd
    });
    d.set_item("nwk", nwk)?;
    Ok(d.into())
}

/// Validate a display filter; returns its canonical pretty-printed form.
#[pyfunction]
fn check_filter(text: &str) -> PyResult<String> {
    Ok(parse_filter(text).map_err(value_err)?.to_string())
}

/// Evaluate a display filter against one PSDU.
#[pyfunction]
#[pyo3(signature = (filter, psdu, fcs_present=true, ts_us=0))]
fn match_filter(filter: &str, psdu: &[u8], fcs_present: bool, ts_us: u64) -> PyResult<bool> {
    let expr = parse_filter(filter).map_err(value_err)?;
    let d = Dissected::dissect(RawFrame::new(psdu.to_vec(), ts_us), fcs_present);
    Ok(eval_filter(&expr, &d))
}

/// Read a PCAP file; returns (fcs_present, [(ts_us, psdu_bytes), ...]).
#[pyfunction]
fn load_pcap(py: Python<'_>, path: &str) -> PyResult<(bool, PyObject)> {
    let (header, frames) = read_pcap(path).map_err(value_err)?;
    let list = PyList::empty_bound(py);
    for f in &frames {
        list.append((f.ts_us, PyBytes::new_bound(py, &f.bytes)))?;
    }
    Ok((header.fcs_present(), list.into()))
}

/// Write frames [(ts_us, psdu_bytes), ...] to a PCAP file.
#[pyfunction]
#[pyo3(signature = (path, frames, with_fcs=true))]
fn save_pcap(path: &str, frames: Vec<(u64, Vec<u8>)>, with_fcs: bool) -> PyResult<u64> {
    let mut writer = PcapWriter::create(path, with_fcs).map_err(value_err)?;
    for (ts_us, bytes) in frames {
        writer
            .write_frame(&RawFrame::new(bytes, ts_us))
            .map_err(value_err)?;
    }
    writer.finish().map_err(value_err)
}

/// Generate the default synthetic PAN scenario and write it as PCAP.
/// Returns the number of frames written.
#[pyfunction]
#[pyo3(signature = (path, duration_s=300.0, seed=1))]
fn generate_pcap(path: &str, duration_s: f64, seed: u64) -> PyResult<u64> {
    let frames = generate_scenario(&default_scenario(duration_s, seed)).map_err(value_err)?;
    let mut writer = PcapWriter::create(path, true).map_err(value_err)?;
    for f in &frames {
        writer.write_frame(f).map_err(value_err)?;
    }
    writer.finish().map_err(value_err)
}

/// Extract windowed per-device features from a PCAP into a CSV file.
/// Returns the number of rows written.
#[pyfunction]
#[pyo3(signature = (pcap_path, csv_path, window_s=5.0))]
fn extract_features(pcap_path: &str, csv_path: &str, window_s: f64) -> PyResult<u64> {
    let cfg = WindowConfig::new(window_s).map_err(value_err)?;
    let rows = extract_from_pcap(pcap_path, cfg).map_err(value_err)?;
    write_feature_csv(&rows, csv_path).map_err(value_err)
}

fn spec_from_name(model: &str, trees: usize, k: usize, seed: u64) -> PyResult<ModelSpec> {
    Ok(match model {
        "tree" => ModelSpec::Tree(TreeParams {
            seed,
            ..Default::default()
        }),
        "forest" => ModelSpec::Forest(ForestParams {
            n_trees: trees,
            seed,
            ..Default::default()
        }),
        "knn" => ModelSpec::Knn { k },
        other => return Err(value_err(format!("unknown model `{other}`"))),
    })
}

/// Cross-validate a classifier on feature CSVs; returns the evaluation
/// report as a JSON string.
#[pyfunction]
#[pyo3(signature = (csv_paths, labels, model="forest", trees=100, k=5, folds=10, combine=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    csv_paths: Vec<String>,
    labels: HashMap<String, String>,
    model: &str,
    trees: usize,
    k: usize,
    folds: usize,
    combine: usize,
    seed: u64,
) -> PyResult<String> {
    let ds = load_and_clean(&csv_paths, &labels).map_err(value_err)?;
    let spec = spec_from_name(model, trees, k, seed)?;
    let outcome = kfold_cv(&ds, &spec, folds, seed).map_err(value_err)?;
    let report = if combine > 1 {
        combined_report(&ds, &outcome.row_probs, combine)
    } else {
        outcome.report
    };
    serde_json::to_string(&report).map_err(value_err)
}

/// Rank features by forest Gini importance; returns [(name, score), ...]
/// in descending order.
#[pyfunction]
#[pyo3(signature = (csv_paths, labels, trees=100, seed=0))]
fn importance(
    csv_paths: Vec<String>,
    labels: HashMap<String, String>,
    trees: usize,
    seed: u64,
) -> PyResult<Vec<(String, f64)>> {
    let ds = load_and_clean(&csv_paths, &labels).map_err(value_err)?;
    let forest = train_forest(
        &ds,
        &ForestParams {
            n_trees: trees,
            seed,
            ..Default::default()
        },
    )
    .map_err(value_err)?;
    Ok(feature_importance(&forest, 0.0).0)
}

/// Serialize a minimal data frame (short addressing) for test traffic.
#[pyfunction]
#[pyo3(signature = (seq_no, pan_id, dst, src, payload, with_fcs=true))]
fn build_data_frame(
    py: Python<'_>,
    seq_no: u8,
    pan_id: u16,
    dst: u16,
    src: u16,
    payload: &[u8],
    with_fcs: bool,
) -> PyResult<PyObject> {
    let mac = scent_core::codec::MacFrame::data(
        seq_no,
        pan_id,
        Addr::Short(dst),
        Addr::Short(src),
        payload.to_vec(),
    );
    let bytes = serialize_mac_frame(&mac, with_fcs).map_err(value_err)?;
    Ok(PyBytes::new_bound(py, &bytes).into())
}

#[pymodule]
fn scent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fcs, m)?)?;
    m.add_function(wrap_pyfunction!(fcs_status, m)?)?;
    m.add_function(wrap_pyfunction!(parse_frame, m)?)?;
    m.add_function(wrap_pyfunction!(check_filter, m)?)?;
    m.add_function(wrap_pyfunction!(match_filter, m)?)?;
    m.add_function(wrap_pyfunction!(load_pcap, m)?)?;
    m.add_function(wrap_pyfunction!(save_pcap, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pcap, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(build_data_frame, m)?)?;
    Ok(())
}
