use std::time::Duration;

use base64::Engine;

use super::auth::UserCredential;
use super::codec::{self, Encoding};
use super::{Fault, Value};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {message}")]
    Transport { url: String, message: String },
    #[error("bad response: {0}")]
    Decode(String),
    #[error(transparent)]
    Fault(#[from] Fault),
}

impl ClientError {
    pub fn fault(&self) -> Option<&Fault> {
        match self {
            ClientError::Fault(f) => Some(f),
            _ => None,
        }
    }
}

/// A blocking client for one server.
#[derive(Clone)]
pub struct Client {
    base: String,
    agent: ureq::Agent,
    auth_header: Option<String>,
    passkey: Option<String>,
    encoding: Encoding,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("base", &self.base).finish_non_exhaustive()
    }
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Client {
            base: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
            auth_header: None,
            passkey: None,
            encoding: Encoding::Xml,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = ureq::AgentBuilder::new().timeout(timeout).build();
        self
    }

    pub fn with_user(mut self, cred: &UserCredential) -> Self {
        let raw = format!("{}:{}", cred.username, cred.secret);
        self.auth_header = Some(format!("Basic {}", base64::engine::general_purpose::STANDARD.encode(raw)));
        self
    }

    pub fn with_passkey(mut self, passkey: &str) -> Self {
        self.passkey = Some(passkey.to_string());
        self
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn transport(&self, e: impl std::fmt::Display) -> ClientError {
        ClientError::Transport {
            url: self.base.clone(),
            message: e.to_string(),
        }
    }

    pub fn ping(&self) -> Result<String, ClientError> {
        let resp = self.agent.get(&format!("{}/ping", self.base)).call().map_err(|e| self.transport(e))?;
        resp.into_string().map_err(|e| self.transport(e))
    }

    pub fn call(&self, method: &str, params: &[Value]) -> Result<Value, ClientError> {
        let body = match self.encoding {
            Encoding::Xml => codec::encode_call(method, params),
            Encoding::Json => codec::encode_call_json(method, params),
        };
        let mut req = self
            .agent
            .post(&format!("{}/rpc", self.base))
            .set("Content-Type", self.encoding.content_type());
        if let Some(a) = &self.auth_header {
            req = req.set("Authorization", a);
        }
        if let Some(k) = &self.passkey {
            req = req.set("X-Passkey", k);
        }
        let text = match req.send_string(&body) {
            Ok(r) => r.into_string().map_err(|e| self.transport(e))?,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(ClientError::Decode(format!("HTTP {code}: {text}")));
            }
            Err(e) => return Err(self.transport(e)),
        };
        let decoded = match self.encoding {
            Encoding::Xml => codec::decode_response(&text),
            Encoding::Json => codec::decode_response_json(&text),
        }
        .map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok(decoded?)
    }
}
