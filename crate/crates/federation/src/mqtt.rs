//! MQTT binding on `rumqttc`: QoS 1, persistent sessions and reconnects with
//! capped exponential backoff.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rumqttc::{Client, Connection, Event, MqttOptions, Outgoing, Packet, QoS};
use url::Url;

use crate::error::{FedError, Result};
use crate::transport::{topic_matches, Message, Transport};

pub const DEFAULT_PORT: u16 = 1883;
pub const BACKOFF_INITIAL: Duration = Duration::from_millis(500);
pub const BACKOFF_CAP: Duration = Duration::from_secs(30);
/// Largest packet either side will accept; encrypted updates run to
/// megabytes.
pub const MAX_PACKET: usize = 256 << 20;
const CLOSE_GRACE: Duration = Duration::from_secs(10);

#[derive(Default)]
struct State {
    connected: bool,
    ever_connected: bool,
    closing: bool,
    last_error: Option<String>,
    subscriptions: Vec<(String, Sender<Message>)>,
    subacks: u64,
    publishes: u64,
    pubacks: u64,
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("mqtt state poisoned")
    }

    /// Waits until `done` holds or `deadline` passes; returns whether it held.
    fn wait_until(&self, deadline: Instant, mut done: impl FnMut(&State) -> bool) -> bool {
        let mut st = self.lock();
        loop {
            if done(&st) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self.changed.wait_timeout(st, deadline - now).expect("mqtt state poisoned").0;
        }
    }
}

pub struct MqttTransport {
    client: Client,
    shared: Arc<Shared>,
    timeout: Duration,
    thread: Mutex<Option<JoinHandle<()>>>,
}

/// Host and port from `mqtt://host[:port]` (`tcp://` is accepted too).
pub fn parse_broker_url(url: &str) -> Result<(String, u16)> {
    let parsed = Url::parse(url).map_err(|e| FedError::Transport(format!("invalid broker URL {url:?}: {e}")))?;
    if !matches!(parsed.scheme(), "mqtt" | "tcp") {
        return Err(FedError::Transport(format!(
            "unsupported broker scheme {:?} (expected mqtt:// or tcp://)",
            parsed.scheme()
        )));
    }
    let host = parsed.host_str().filter(|h| !h.is_empty());
    let host = host.ok_or_else(|| FedError::Transport(format!("broker URL {url:?} has no host")))?;
    Ok((host.to_string(), parsed.port().unwrap_or(DEFAULT_PORT)))
}

impl MqttTransport {
    /// Connects and waits up to `timeout` for the broker to accept the
    /// session. The same budget bounds each later subscribe and the final
    /// flush.
    pub fn connect(url: &str, client_id: &str, timeout: Duration) -> Result<Self> {
        let (host, port) = parse_broker_url(url)?;
        let mut opts = MqttOptions::new(client_id, host, port);
        opts.set_clean_session(false)
            .set_keep_alive(Duration::from_secs(30))
            .set_max_packet_size(MAX_PACKET, MAX_PACKET);
        let (client, connection) = Client::new(opts, 64);
        let shared = Arc::new(Shared { state: Mutex::new(State::default()), changed: Condvar::new() });
        let thread = {
            let shared = shared.clone();
            let client = client.clone();
            std::thread::Builder::new()
                .name(format!("mqtt-{client_id}"))
                .spawn(move || event_loop(connection, client, shared))
                .map_err(|e| FedError::Transport(format!("cannot start MQTT thread: {e}")))?
        };
        let transport = Self { client, shared, timeout, thread: Mutex::new(Some(thread)) };
        let ok = transport.shared.wait_until(Instant::now() + timeout, |s| s.connected);
        if !ok {
            let reason = transport.shared.lock().last_error.clone().unwrap_or_else(|| "no reply".into());
            transport.shutdown();
            return Err(FedError::Transport(format!("broker {url} unreachable within {timeout:?}: {reason}")));
        }
        Ok(transport)
    }

    fn shutdown(&self) {
        self.shared.lock().closing = true;
        self.shared.changed.notify_all();
        let _ = self.client.try_disconnect();
        if let Some(handle) = self.thread.lock().expect("poisoned").take() {
            // The loop may be sleeping out a backoff; it exits on its own.
            if handle.is_finished() {
                let _ = handle.join();
            }
        }
    }
}

fn event_loop(mut connection: Connection, client: Client, shared: Arc<Shared>) {
    let mut backoff = BACKOFF_INITIAL;
    for event in connection.iter() {
        match event {
            Ok(Event::Incoming(Packet::ConnAck(ack))) => {
                backoff = BACKOFF_INITIAL;
                let mut st = shared.lock();
                if st.ever_connected && !ack.session_present {
                    for (pattern, _) in &st.subscriptions {
                        if let Err(e) = client.try_subscribe(pattern.clone(), QoS::AtLeastOnce) {
                            log::warn!("resubscribe to {pattern} failed: {e}");
                        }
                    }
                }
                st.connected = true;
                st.ever_connected = true;
                shared.changed.notify_all();
            }
            Ok(Event::Incoming(Packet::Publish(p))) => {
                let mut st = shared.lock();
                let payload = p.payload.to_vec();
                st.subscriptions.retain(|(pattern, tx)| {
                    !topic_matches(pattern, &p.topic)
                        || tx.send(Message { topic: p.topic.clone(), payload: payload.clone() }).is_ok()
                });
            }
            Ok(Event::Incoming(Packet::SubAck(_))) => {
                shared.lock().subacks += 1;
                shared.changed.notify_all();
            }
            Ok(Event::Incoming(Packet::PubAck(_))) => {
                shared.lock().pubacks += 1;
                shared.changed.notify_all();
            }
            Ok(Event::Outgoing(Outgoing::Disconnect)) => break,
            Ok(_) => {}
            Err(e) => {
                {
                    let mut st = shared.lock();
                    st.connected = false;
                    st.last_error = Some(e.to_string());
                    if st.closing {
                        break;
                    }
                }
                log::warn!("MQTT connection lost ({e}); retrying in {backoff:?}");
                shared.changed.notify_all();
                let resume = Instant::now() + backoff;
                if shared.wait_until(resume, |s| s.closing) {
                    break;
                }
                backoff = (backoff * 2).min(BACKOFF_CAP);
            }
        }
    }
    let mut st = shared.lock();
    st.connected = false;
    st.subscriptions.clear();
    shared.changed.notify_all();
}

impl Transport for MqttTransport {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<()> {
        if self.shared.lock().closing {
            return Err(FedError::Transport("MQTT transport is closed".into()));
        }
        // Queued while disconnected; the session replays after reconnect.
        self.client
            .publish(topic, QoS::AtLeastOnce, false, payload.to_vec())
            .map_err(|e| FedError::Transport(format!("publish on {topic}: {e}")))?;
        self.shared.lock().publishes += 1;
        Ok(())
    }

    fn subscribe(&self, pattern: &str) -> Result<Receiver<Message>> {
        let (tx, rx) = channel();
        let target = {
            let mut st = self.shared.lock();
            if st.closing {
                return Err(FedError::Transport("MQTT transport is closed".into()));
            }
            st.subscriptions.push((pattern.to_string(), tx));
            st.subacks + 1
        };
        self.client
            .subscribe(pattern, QoS::AtLeastOnce)
            .map_err(|e| FedError::Transport(format!("subscribe to {pattern}: {e}")))?;
        if !self.shared.wait_until(Instant::now() + self.timeout, |s| s.subacks >= target) {
            return Err(FedError::Timeout(format!("no SUBACK for {pattern} within {:?}", self.timeout)));
        }
        Ok(rx)
    }

    fn close(&self) -> Result<()> {
        let grace = self.timeout.min(CLOSE_GRACE);
        let flushed = self.shared.wait_until(Instant::now() + grace, |s| s.pubacks >= s.publishes || s.closing);
        self.shared.lock().closing = true;
        self.shared.changed.notify_all();
        let _ = self.client.disconnect();
        if let Some(handle) = self.thread.lock().expect("poisoned").take() {
            let _ = handle.join();
        }
        if !flushed {
            return Err(FedError::Transport("unacknowledged publishes at close".into()));
        }
        Ok(())
    }
}

impl Drop for MqttTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broker_urls() {
        assert_eq!(parse_broker_url("mqtt://localhost").unwrap(), ("localhost".into(), 1883));
        assert_eq!(parse_broker_url("tcp://10.0.0.2:11883").unwrap(), ("10.0.0.2".into(), 11883));
        assert!(parse_broker_url("http://x").is_err());
        assert!(parse_broker_url("not a url").is_err());
    }

    #[test]
    fn unreachable_broker_fails_within_timeout() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let start = Instant::now();
        let err = MqttTransport::connect(&format!("mqtt://127.0.0.1:{port}"), "nobody", Duration::from_secs(2));
        assert!(matches!(err, Err(FedError::Transport(_))));
        assert!(start.elapsed() < Duration::from_secs(5));
    }
}
