//! Writes the fuzz corpus seeds: `cargo run -p feddp --example gen_corpus -- fuzz/corpus`.

use std::fs;
use std::path::{Path, PathBuf};

use feddp::experiment::ExperimentConfig;
use feddp::learn::gen_dataset;
use feddp::net::{write_capture, ClientMessage, Frame, ServerMessage};

fn put(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fuzz/corpus".into()));

    let client = ClientMessage::new(3, 1, vec![0.25, -1.5, 1e-9], true).encode();
    let server = ServerMessage::new(3, vec![0.5; 6], 0x0123_4567_89ab_cdef).encode();
    let empty = ClientMessage::new(0, 0, vec![], false).encode();
    let frames = root.join("decode_frame");
    put(&frames, "client", &client);
    put(&frames, "server", &server);
    put(&frames, "empty_client", &empty);
    put(&frames, "truncated", &client[..client.len() - 3]);
    let mut flipped = server.clone();
    flipped[13] ^= 0x40;
    put(&frames, "bad_crc", &flipped);

    let capture = write_capture(&[
        Frame::Server(ServerMessage::new(0, vec![1.0, 2.0], 7)),
        Frame::Client(ClientMessage::new(0, 0, vec![0.1, 0.2], true)),
        Frame::Client(ClientMessage::new(0, 1, vec![-0.1, 0.0], true)),
    ]);
    let captures = root.join("read_capture");
    put(&captures, "round", &capture);
    put(&captures, "single", &client);
    put(&captures, "empty", &[]);
    put(&captures, "cut", &capture[..capture.len() / 2]);

    let ds = gen_dataset(2, 8, 8, 5).unwrap().to_bytes();
    let datasets = root.join("decode_dataset");
    put(&datasets, "two_8x8", &ds);
    put(&datasets, "header_only", &ds[..16]);
    let mut bad_label = ds.clone();
    *bad_label.last_mut().unwrap() = 9;
    put(&datasets, "bad_label", &bad_label);

    let configs = root.join("parse_config");
    put(&configs, "default", ExperimentConfig::default().to_json().as_bytes());
    put(&configs, "empty_object", b"{}");
    put(
        &configs,
        "no_dp_skew",
        br#"{"clients": 4, "rounds": 3, "dp": {"mechanism": "none", "sigma": 0.05, "clip_c": 1.0}, "dataset": {"n": 40, "h": 16, "w": 16, "partition": {"mode": "label_skew", "factor": 2.0}}}"#,
    );
    put(&configs, "typo", br#"{"dp": {"mechanism": "gaussian", "sigma": 0.05, "clip_c": 0.5, "sigmaa": 1}}"#);
}
