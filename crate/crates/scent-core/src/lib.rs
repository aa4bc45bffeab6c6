//! Capture-and-analysis toolkit for IEEE 802.15.4 / Zigbee networks.
//!
//! The crate dissects MAC and Zigbee network-layer frames, reads and writes
//! classic PCAP, evaluates Wireshark-style display filters, extracts
//! per-device time-windowed traffic features online, runs concurrent capture
//! tasks over bounded queues, and identifies devices from the extracted
//! features with tree-based classifiers.

pub mod codec;
pub mod features;
pub mod filter;
pub mod ident;
pub mod pcap;
pub mod pipeline;
pub mod service;
