//! Loopback TCP echo RPC with fixed-size frames, used as the baseline for the
//! shared-memory channel.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::stats::LatencyHistogram;

pub struct TcpEchoServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpEchoServer {
    /// Binds an ephemeral loopback port and echoes `frame_bytes` frames on
    /// every accepted connection (one thread per connection).
    pub fn spawn(frame_bytes: usize) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept = thread::spawn(move || {
            let mut workers = Vec::new();
            while !stop2.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((sock, _)) => {
                        let _ = sock.set_nonblocking(false);
                        let _ = sock.set_nodelay(true);
                        workers.push(thread::spawn(move || echo_loop(sock, frame_bytes)));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
                    Err(_) => break,
                }
            }
            for w in workers {
                let _ = w.join();
            }
        });
        Ok(Self { addr, stop, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for TcpEchoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn echo_loop(mut sock: TcpStream, frame: usize) {
    let mut buf = vec![0u8; frame];
    while sock.read_exact(&mut buf).is_ok() {
        if sock.write_all(&buf).is_err() {
            break;
        }
    }
}

pub struct TcpClient {
    sock: TcpStream,
    frame: usize,
    pub latency: LatencyHistogram,
}

impl TcpClient {
    pub fn connect(addr: SocketAddr, frame_bytes: usize) -> io::Result<Self> {
        let sock = TcpStream::connect(addr)?;
        sock.set_nodelay(true)?;
        Ok(Self { sock, frame: frame_bytes, latency: LatencyHistogram::new() })
    }

    pub fn call(&mut self, req: &[u8], resp: &mut [u8]) -> io::Result<()> {
        debug_assert_eq!(req.len(), self.frame);
        let t = Instant::now();
        self.sock.write_all(req)?;
        self.sock.read_exact(resp)?;
        self.latency.record(t.elapsed());
        Ok(())
    }

    /// Keeps up to `qd` frames in flight until `deadline`; returns completed calls.
    pub fn run_pipelined(&mut self, qd: usize, deadline: Instant) -> io::Result<u64> {
        let qd = qd.max(1);
        let req = vec![0x5au8; self.frame];
        let mut resp = vec![0u8; self.frame];
        let mut sent = std::collections::VecDeque::with_capacity(qd);
        let mut done = 0u64;
        loop {
            let open = Instant::now() < deadline;
            if open {
                while sent.len() < qd {
                    self.sock.write_all(&req)?;
                    sent.push_back(Instant::now());
                }
            }
            let Some(t) = sent.pop_front() else { break };
            self.sock.read_exact(&mut resp)?;
            self.latency.record(t.elapsed());
            done += 1;
        }
        Ok(done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrip() {
        let srv = TcpEchoServer::spawn(64).unwrap();
        let mut c = TcpClient::connect(srv.addr(), 64).unwrap();
        let req: Vec<u8> = (0..64).collect();
        let mut resp = vec![0u8; 64];
        for _ in 0..10 {
            c.call(&req, &mut resp).unwrap();
            assert_eq!(req, resp);
        }
        assert_eq!(c.latency.count(), 10);
        let n = c.run_pipelined(8, Instant::now() + Duration::from_millis(20)).unwrap();
        assert!(n > 0);
        drop(c);
    }
}
