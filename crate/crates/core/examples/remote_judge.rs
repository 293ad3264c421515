//! Scores one output through the HTTP judge protocol against a local stub
//! server that always answers with fixed scores.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use mive::datagen::{generate_sample, EditType, GenConfig};
use mive::evaluator::{Dimension, JudgeClient};

fn stub_reply() -> String {
    let items: Vec<String> = Dimension::ALL
        .iter()
        .zip([8.0, 9.0, 7.5, 9.0, 8.0, 10.0])
        .map(|(d, s)| format!(r#"{{"{}_score": {s}, "reasoning": "stub"}}"#, d.code()))
        .collect();
    format!("[{}]", items.join(","))
}

fn main() -> mive::Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}/judge", listener.local_addr().expect("addr"));
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().expect("accept");
        let mut reader = BufReader::new(stream);
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).expect("header");
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().expect("length");
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).expect("body");
        eprintln!("stub received {} bytes", body.len());
        let reply = stub_reply();
        let mut stream = reader.into_inner();
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .expect("write");
    });

    let s = generate_sample(EditType::Delete, 2, GenConfig::default())?;
    let scores = JudgeClient::new(url).score(&s, &s.tgt_video, 9)?;
    for (d, sc) in scores.iter() {
        println!("{:3} {:5.2}  {}", d.code(), sc.score, sc.reasoning);
    }
    println!("mean {:.3}", scores.mean());
    Ok(())
}
