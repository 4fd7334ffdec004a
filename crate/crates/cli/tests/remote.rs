//! The CLI against a stand-in model server speaking the wire protocol.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use ptdiff_core::protocol::{read_frame, write_frame, Frame, Header, MessageType};

/// ε = z/2 + condition id; encode 2p − 1, decode (z + 1)/2.
fn session(stream: TcpStream) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = BufWriter::new(stream);
    while let Ok(Some(frame)) = read_frame(&mut reader) {
        let mut header = Header::new(frame.header.request_id);
        let reply = match frame.kind {
            MessageType::Hello => {
                header.shape = Some(vec![1, 16, 16]);
                header.dtype = Some("f32".into());
                Frame::new(MessageType::Result, header)
            }
            MessageType::EmbedText => {
                header.condition_id =
                    Some(u64::from(!frame.header.text.unwrap_or_default().is_empty()));
                Frame::new(MessageType::Result, header)
            }
            MessageType::Eps => {
                let c = frame.header.condition_id.unwrap_or(0) as f32;
                header.shape = frame.header.shape.clone();
                Frame::new(MessageType::Result, header)
                    .with_payload(frame.payload.iter().map(|v| 0.5 * v + c).collect())
            }
            MessageType::Encode | MessageType::Decode => {
                header.shape = frame.header.shape.clone();
                let f: fn(f32) -> f32 = if frame.kind == MessageType::Encode {
                    |p| 2.0 * p - 1.0
                } else {
                    |z| (z + 1.0) / 2.0
                };
                Frame::new(MessageType::Result, header)
                    .with_payload(frame.payload.iter().map(|&v| f(v)).collect())
            }
            _ => break,
        };
        if write_frame(&mut writer, &reply).is_err() {
            break;
        }
    }
}

/// Serves forever in the background; returns the address and a connection counter.
fn spawn_server() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let connections = Arc::new(AtomicUsize::new(0));
    let counter = connections.clone();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            counter.fetch_add(1, Ordering::SeqCst);
            thread::spawn(move || session(stream));
        }
    });
    (addr, connections)
}

fn face() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/images/face.pgm")
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str], addr: &str) {
    let out = Command::new(env!("CARGO_BIN_EXE_ptdiff"))
        .args(args)
        .env("PTDIFF_ADDR", addr)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_through_remote_backend_and_codec() {
    let (addr, _) = spawn_server();
    let dir = tempfile::tempdir().unwrap();
    let face = face();
    let out = dir.path().to_str().unwrap();
    run(
        &[
            "generate",
            "--backend",
            "remote",
            "--ref",
            &face,
            "--prompt",
            "stripes",
            "--steps",
            "10",
            "--invert-steps",
            "10",
            "--out",
            out,
        ],
        &addr,
    );
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap())
            .unwrap();
    assert_eq!(config["backend"], "remote");
    assert_eq!(config["codec"], "remote");
    assert_eq!(config["addr"], addr.as_str());
    assert!(dir.path().join("output.pgm").exists());
}

#[test]
fn remote_sweep_completes() {
    let (addr, connections) = spawn_server();
    let dir = tempfile::tempdir().unwrap();
    let face = face();
    let out = dir.path().to_str().unwrap();
    run(
        &[
            "sweep",
            "--backend",
            "remote",
            "--ref",
            &face,
            "--prompt",
            "stripes",
            "--steps",
            "10",
            "--invert-steps",
            "10",
            "--d",
            "-2..2",
            "--seeds",
            "3",
            "--out",
            out,
        ],
        &addr,
    );
    let rows = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    // The session connection plus at most one per worker thread.
    let n = connections.load(Ordering::SeqCst);
    assert!(
        n >= 2 && n <= 1 + thread::available_parallelism().unwrap().get(),
        "{n} connections"
    );
}
