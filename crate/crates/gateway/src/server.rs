//! Accept loop and per-session threads: a reader that parses client
//! messages, a ticker that owns the session, and a writer.

use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use hdspace_core::sim::CONTROL_HZ;

use crate::protocol::{parse_client, ClientMessage, Cmd, ServerMessage};
use crate::session::{Session, SessionConfig};
use crate::transport::{self, Reader, Writer};

pub fn tick_period() -> Duration {
    Duration::from_secs_f64(1.0 / CONTROL_HZ as f64)
}

enum Inbound {
    Msg(ClientMessage),
    Bad(String),
    Closed,
}

enum Outbound {
    Msg(ServerMessage),
    Close,
}

pub struct Server {
    listener: TcpListener,
    cfg: SessionConfig,
}

impl Server {
    pub fn bind(addr: impl std::net::ToSocketAddrs, cfg: SessionConfig) -> io::Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir)?;
        Ok(Server { listener: TcpListener::bind(addr)?, cfg })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves sessions one at a time, forever.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            match stream {
                Ok(s) => {
                    if let Err(e) = run_session(s, self.cfg.clone()) {
                        eprintln!("session ended with error: {e}");
                    }
                }
                Err(e) => eprintln!("accept failed: {e}"),
            }
        }
        Ok(())
    }

    pub fn spawn(self) -> thread::JoinHandle<io::Result<()>> {
        thread::spawn(move || self.run())
    }
}

fn reader_loop(mut reader: Reader, tx: Sender<Inbound>) {
    loop {
        let item = match reader.next() {
            Ok(Some(line)) => match parse_client(&line) {
                Ok(m) => Inbound::Msg(m),
                Err(e) => Inbound::Bad(e),
            },
            Ok(None) | Err(_) => Inbound::Closed,
        };
        let closed = matches!(item, Inbound::Closed);
        if tx.send(item).is_err() || closed {
            return;
        }
    }
}

fn writer_loop(mut writer: Writer, rx: Receiver<Outbound>, control: TcpStream) {
    for item in rx {
        match item {
            Outbound::Msg(m) => {
                if writer.send(&m.to_line()).is_err() {
                    break;
                }
            }
            Outbound::Close => break,
        }
    }
    writer.close();
    let _ = control.shutdown(Shutdown::Both);
}

pub fn run_session(stream: TcpStream, cfg: SessionConfig) -> io::Result<()> {
    let (reader, writer, control) = transport::split(stream)?;
    let writer_control = control.try_clone()?;
    let (in_tx, in_rx) = mpsc::channel();
    let (out_tx, out_rx) = mpsc::channel();
    let reader_handle = thread::spawn(move || reader_loop(reader, in_tx));
    let writer_handle = thread::spawn(move || writer_loop(writer, out_rx, writer_control));

    let mut session = Session::new(cfg);
    let period = tick_period();
    let mut next = Instant::now() + period;
    let mut pending: Option<Cmd> = None;
    'session: loop {
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        }
        loop {
            let item = match in_rx.try_recv() {
                Ok(item) => item,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => break 'session,
            };
            match item {
                Inbound::Closed => break 'session,
                Inbound::Bad(message) => {
                    let _ = out_tx.send(Outbound::Msg(ServerMessage::Error { message }));
                    break 'session;
                }
                Inbound::Msg(ClientMessage::Cmd(c)) => match session.accepts_cmd() {
                    Ok(()) => pending = Some(c),
                    Err(message) => {
                        let _ = out_tx.send(Outbound::Msg(ServerMessage::Error { message }));
                        break 'session;
                    }
                },
                Inbound::Msg(m) => {
                    if matches!(m, ClientMessage::Begin { .. } | ClientMessage::End { .. }) {
                        pending = None;
                    }
                    let reply = session.control(m);
                    for msg in reply.messages {
                        let _ = out_tx.send(Outbound::Msg(msg));
                    }
                    if reply.close {
                        break 'session;
                    }
                }
            }
        }
        if let Some(state) = session.tick(pending.take()) {
            if out_tx.send(Outbound::Msg(state)).is_err() {
                break;
            }
        }
        next += period;
        let now = Instant::now();
        if next + period < now {
            next = now + period;
        }
    }
    let _ = out_tx.send(Outbound::Close);
    drop(out_tx);
    let _ = writer_handle.join();
    let _ = control.shutdown(Shutdown::Both);
    let _ = reader_handle.join();
    Ok(())
}
