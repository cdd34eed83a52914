//! Getting a query to a resolver and a response back.

use std::future::Future;
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::time::Instant;

use crate::wire::{decode_response, encode_query, DnsQuery, DnsResponse, WireError};

#[derive(Debug, Clone)]
pub struct Exchange {
    pub response: DnsResponse,
    pub rtt_ms: f64,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no response within the timeout")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub trait Transport: Send + Sync + 'static {
    fn exchange(
        &self,
        server: SocketAddr,
        query: &DnsQuery,
        timeout: Duration,
    ) -> impl Future<Output = Result<Exchange, TransportError>> + Send;
}

/// Plain DNS over UDP, one ephemeral socket per exchange.
#[derive(Debug, Default, Clone, Copy)]
pub struct UdpTransport;

impl Transport for UdpTransport {
    async fn exchange(
        &self,
        server: SocketAddr,
        query: &DnsQuery,
        timeout: Duration,
    ) -> Result<Exchange, TransportError> {
        let bind: SocketAddr = if server.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind).await?;
        socket.connect(server).await?;
        let packet = encode_query(query);
        let started = Instant::now();
        let deadline = started + timeout;
        socket.send(&packet).await?;
        let mut buf = [0u8; 4096];
        loop {
            let n = match tokio::time::timeout_at(deadline, socket.recv(&mut buf)).await {
                Err(_) => return Err(TransportError::Timeout),
                Ok(res) => res?,
            };
            let rtt_ms = started.elapsed().as_secs_f64() * 1e3;
            let response = match decode_response(&buf[..n]) {
                Ok(r) => r,
                Err(e) => {
                    log::debug!("dropping undecodable reply from {server}: {e}");
                    continue;
                }
            };
            let same_question = response
                .question
                .as_ref()
                .is_none_or(|q| q.name == query.qname && q.qtype == query.qtype);
            if response.id == query.id && same_question {
                return Ok(Exchange { response, rtt_ms });
            }
        }
    }
}
