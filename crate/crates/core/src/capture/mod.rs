//! Capture and ground-truth ingestion.

mod labels;
mod pcap;

pub use labels::{
    parse_labels, read_labels, timeline_path_for, validate_marks, write_label_rows, write_labels,
    LabeledSession, ResolutionClass, StreamConfig,
};
pub use pcap::{
    read_capture, CaptureReader, CaptureWriter, ReaderStats, DEFAULT_EPOCH_NS, DEFAULT_SNAPLEN,
};
