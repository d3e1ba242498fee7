//! Transport decorator that counts every published envelope.

use std::sync::mpsc::Receiver;
use std::sync::Arc;

use fedhenet_core::metrics::{ByteLedger, Direction, LogEntry, MessageLog};
use fedhenet_core::wire::{peek_header, MsgType};

use crate::error::Result;
use crate::transport::{Message, Transport};

/// Counts at the publisher, so a broadcast MODEL is one transmission no
/// matter how many clients receive it.
pub struct CountingTransport<T> {
    inner: T,
    ledger: Arc<ByteLedger>,
    log: Arc<MessageLog>,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T, ledger: Arc<ByteLedger>, log: Arc<MessageLog>) -> Self {
        Self { inner, ledger, log }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

pub fn direction_of(msg_type: MsgType) -> Direction {
    match msg_type {
        MsgType::Update => Direction::Up,
        MsgType::Model | MsgType::Abort => Direction::Down,
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<()> {
        self.inner.publish(topic, payload)?;
        match peek_header(payload) {
            Some((msg_type, round, sender)) => {
                let direction = direction_of(msg_type);
                self.ledger.record(direction, msg_type, payload.len());
                self.log.push(LogEntry {
                    direction,
                    msg_type,
                    round,
                    sender,
                    bytes: payload.len() as u64,
                    topic: topic.to_string(),
                });
            }
            None => log::warn!("uncounted non-envelope publish of {} bytes on {topic}", payload.len()),
        }
        Ok(())
    }

    fn subscribe(&self, pattern: &str) -> Result<Receiver<Message>> {
        self.inner.subscribe(pattern)
    }

    fn close(&self) -> Result<()> {
        self.inner.close()
    }
}
