//! Publish/subscribe transports: the trait, MQTT-style topic filters and an
//! in-process loopback broker.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use crate::error::{FedError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub payload: Vec<u8>,
}

/// Connected endpoint. Subscriptions hand back a queue that the caller
/// drains; receive paths only enqueue.
pub trait Transport: Send + Sync {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<()>;
    fn subscribe(&self, pattern: &str) -> Result<Receiver<Message>>;
    /// Flushes outstanding publishes and disconnects.
    fn close(&self) -> Result<()>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<()> {
        (**self).publish(topic, payload)
    }
    fn subscribe(&self, pattern: &str) -> Result<Receiver<Message>> {
        (**self).subscribe(pattern)
    }
    fn close(&self) -> Result<()> {
        (**self).close()
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<()> {
        (**self).publish(topic, payload)
    }
    fn subscribe(&self, pattern: &str) -> Result<Receiver<Message>> {
        (**self).subscribe(pattern)
    }
    fn close(&self) -> Result<()> {
        (**self).close()
    }
}

/// MQTT filter matching with `+` (one level) and a trailing `#`.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    let mut p = pattern.split('/');
    let mut t = topic.split('/');
    loop {
        match (p.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

pub fn update_topic(round: u32, client: u32) -> String {
    format!("fedhenet/{round}/update/{client}")
}

pub fn update_filter(round: u32) -> String {
    format!("fedhenet/{round}/update/+")
}

pub fn model_topic(round: u32) -> String {
    format!("fedhenet/{round}/model")
}

type Subscribers = Vec<(String, Sender<Message>)>;

/// In-process broker; delivery is synchronous and in publish order.
#[derive(Clone, Default)]
pub struct LoopbackBroker {
    subscribers: Arc<Mutex<Subscribers>>,
}

impl LoopbackBroker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&self) -> LoopbackTransport {
        LoopbackTransport { broker: self.clone(), closed: Mutex::new(false) }
    }
}

pub struct LoopbackTransport {
    broker: LoopbackBroker,
    closed: Mutex<bool>,
}

impl LoopbackTransport {
    fn check_open(&self) -> Result<()> {
        if *self.closed.lock().expect("poisoned") {
            return Err(FedError::Transport("loopback endpoint is closed".into()));
        }
        Ok(())
    }
}

impl Transport for LoopbackTransport {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<()> {
        self.check_open()?;
        let mut subs = self.broker.subscribers.lock().expect("poisoned");
        // Dropped receivers are pruned on the way.
        subs.retain(|(pattern, tx)| {
            !topic_matches(pattern, topic)
                || tx.send(Message { topic: topic.to_string(), payload: payload.to_vec() }).is_ok()
        });
        Ok(())
    }

    fn subscribe(&self, pattern: &str) -> Result<Receiver<Message>> {
        self.check_open()?;
        let (tx, rx) = channel();
        self.broker.subscribers.lock().expect("poisoned").push((pattern.to_string(), tx));
        Ok(rx)
    }

    fn close(&self) -> Result<()> {
        *self.closed.lock().expect("poisoned") = true;
        Ok(())
    }
}
