//! In-process MQTT broker (`rumqttd`) on a loopback port.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use crate::error::{FedError, Result};
use crate::mqtt::MAX_PACKET;

/// A running broker. The broker thread lives until the process exits.
pub struct EmbeddedBroker {
    addr: SocketAddr,
}

impl EmbeddedBroker {
    /// Starts a broker on a free `127.0.0.1` port and waits until it accepts
    /// connections.
    pub fn start() -> Result<Self> {
        let port = TcpListener::bind("127.0.0.1:0")
            .and_then(|l| l.local_addr())
            .map_err(|e| FedError::Transport(format!("no free port for the broker: {e}")))?
            .port();
        let addr: SocketAddr = ([127, 0, 0, 1], port).into();
        let config_text = format!(
            r#"
id = 0

[router]
id = 0
max_connections = 1000
max_outgoing_packet_count = 200
max_segment_size = {MAX_PACKET}
max_segment_count = 10

[v4.1]
name = "v4-1"
listen = "{addr}"
next_connection_delay_ms = 1

[v4.1.connections]
connection_timeout_ms = 60000
max_payload_size = {MAX_PACKET}
max_inflight_count = 100
dynamic_filters = true
"#
        );
        let config: rumqttd::Config =
            toml::from_str(&config_text).map_err(|e| FedError::Transport(format!("broker config: {e}")))?;
        std::thread::Builder::new()
            .name("embedded-broker".into())
            .spawn(move || {
                if let Err(e) = rumqttd::Broker::new(config).start() {
                    log::error!("embedded broker stopped: {e}");
                }
            })
            .map_err(|e| FedError::Transport(format!("cannot start broker thread: {e}")))?;
        let deadline = Instant::now() + Duration::from_secs(5);
        while TcpStream::connect_timeout(&addr, Duration::from_millis(100)).is_err() {
            if Instant::now() >= deadline {
                return Err(FedError::Transport(format!("embedded broker did not listen on {addr}")));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Ok(Self { addr })
    }

    pub fn url(&self) -> String {
        format!("mqtt://{}", self.addr)
    }
}
