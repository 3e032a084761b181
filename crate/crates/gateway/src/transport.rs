//! Line-delimited JSON over TCP, or the same payloads as WebSocket text
//! messages. A connection whose first bytes are `GET ` is treated as a
//! WebSocket upgrade.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use tungstenite::protocol::Role;
use tungstenite::{Message, WebSocket};

pub enum Reader {
    Line(BufReader<TcpStream>),
    Ws(WebSocket<TcpStream>),
}

pub enum Writer {
    Line(TcpStream),
    Ws(WebSocket<TcpStream>),
}

fn ws_err(e: tungstenite::Error) -> io::Error {
    match e {
        tungstenite::Error::Io(e) => e,
        other => io::Error::other(other.to_string()),
    }
}

fn is_upgrade(stream: &TcpStream) -> io::Result<bool> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut buf = [0u8; 4];
    let mut n = 0;
    for _ in 0..50 {
        n = stream.peek(&mut buf)?;
        if n >= 4 || n == 0 {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    stream.set_read_timeout(None)?;
    Ok(n >= 4 && &buf == b"GET ")
}

/// Splits an accepted connection into independent read and write halves.
pub fn split(stream: TcpStream) -> io::Result<(Reader, Writer, TcpStream)> {
    stream.set_nodelay(true)?;
    let control = stream.try_clone()?;
    if is_upgrade(&stream)? {
        let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
        let raw = ws.get_ref().try_clone()?;
        let writer = WebSocket::from_raw_socket(raw, Role::Server, None);
        Ok((Reader::Ws(ws), Writer::Ws(writer), control))
    } else {
        let writer = stream.try_clone()?;
        Ok((Reader::Line(BufReader::new(stream)), Writer::Line(writer), control))
    }
}

impl Reader {
    /// Next payload, or `None` once the peer has closed.
    pub fn next(&mut self) -> io::Result<Option<String>> {
        match self {
            Reader::Line(r) => loop {
                let mut line = String::new();
                if r.read_line(&mut line)? == 0 {
                    return Ok(None);
                }
                let line = line.trim();
                if !line.is_empty() {
                    return Ok(Some(line.to_string()));
                }
            },
            Reader::Ws(ws) => loop {
                match ws.read() {
                    Ok(Message::Text(t)) => return Ok(Some(t.as_str().trim().to_string())),
                    Ok(Message::Binary(b)) => return Ok(Some(String::from_utf8_lossy(&b).trim().to_string())),
                    Ok(Message::Close(_)) => return Ok(None),
                    Ok(_) => continue,
                    Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
                    Err(e) => return Err(ws_err(e)),
                }
            },
        }
    }
}

impl Writer {
    pub fn send(&mut self, payload: &str) -> io::Result<()> {
        match self {
            Writer::Line(s) => {
                s.write_all(payload.as_bytes())?;
                s.write_all(b"\n")?;
                s.flush()
            }
            Writer::Ws(ws) => ws.send(Message::text(payload)).map_err(ws_err),
        }
    }

    pub fn close(&mut self) {
        if let Writer::Ws(ws) = self {
            let _ = ws.close(None);
            let _ = ws.flush();
        }
    }
}
