//! User authentication and per-job passkeys.
//!
//! Credentials live in a plain text file, one user per line:
//!
//! ```text
//! alice:operator:100000:<salt hex>:<pbkdf2-sha256 hex>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::rngs::OsRng;
use rand::RngCore;
use sha2::Sha256;
use subtle::ConstantTimeEq;

pub const DEFAULT_ITERATIONS: u32 = 100_000;
const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum AuthError {
    /// Same error for unknown users and wrong secrets.
    #[error("authentication failed")]
    AuthFailed,
    #[error("insufficient privileges")]
    Forbidden,
    #[error("credential file line {line}: {message}")]
    BadFile { line: usize, message: String },
    #[error("credential file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// May submit and control datasets.
    Operator,
    /// May only read monitoring views.
    ReadOnly,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Operator => "operator",
            Role::ReadOnly => "readonly",
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct UserCredential {
    pub username: String,
    pub secret: String,
}

impl UserCredential {
    pub fn new(username: &str, secret: &str) -> Self {
        UserCredential {
            username: username.to_string(),
            secret: secret.to_string(),
        }
    }
}

// Keeps secrets out of logs and panic messages.
impl std::fmt::Debug for UserCredential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserCredential")
            .field("username", &self.username)
            .field("secret", &"<redacted>")
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub user: String,
    pub role: Role,
}

impl Principal {
    pub fn require_operator(&self) -> Result<(), AuthError> {
        match self.role {
            Role::Operator => Ok(()),
            Role::ReadOnly => Err(AuthError::Forbidden),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    role: Role,
    iterations: u32,
    salt: Vec<u8>,
    hash: Vec<u8>,
}

/// Salted, iterated password hashes.
#[derive(Debug, Clone, Default)]
pub struct CredentialStore {
    users: BTreeMap<String, Entry>,
    iterations: u32,
}

fn derive(secret: &str, salt: &[u8], iterations: u32) -> [u8; HASH_LEN] {
    let mut out = [0u8; HASH_LEN];
    pbkdf2::pbkdf2_hmac::<Sha256>(secret.as_bytes(), salt, iterations, &mut out);
    out
}

impl CredentialStore {
    pub fn new() -> Self {
        CredentialStore {
            users: BTreeMap::new(),
            iterations: DEFAULT_ITERATIONS,
        }
    }

    /// Iteration count for users added from now on.
    pub fn with_iterations(mut self, iterations: u32) -> Self {
        self.iterations = iterations.max(1);
        self
    }

    pub fn add_user(&mut self, username: &str, secret: &str, role: Role) {
        let mut salt = vec![0u8; SALT_LEN];
        OsRng.fill_bytes(&mut salt);
        let iterations = if self.iterations == 0 { DEFAULT_ITERATIONS } else { self.iterations };
        let hash = derive(secret, &salt, iterations).to_vec();
        self.users.insert(
            username.to_string(),
            Entry {
                role,
                iterations,
                salt,
                hash,
            },
        );
    }

    pub fn remove_user(&mut self, username: &str) -> bool {
        self.users.remove(username).is_some()
    }

    pub fn usernames(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn authenticate(&self, cred: &UserCredential) -> Result<Principal, AuthError> {
        match self.users.get(&cred.username) {
            Some(e) => {
                let got = derive(&cred.secret, &e.salt, e.iterations);
                if bool::from(got.ct_eq(e.hash.as_slice())) && !cred.username.is_empty() {
                    Ok(Principal {
                        user: cred.username.clone(),
                        role: e.role,
                    })
                } else {
                    Err(AuthError::AuthFailed)
                }
            }
            None => {
                // same work as a real check so timing does not reveal the user
                let iterations = if self.iterations == 0 { DEFAULT_ITERATIONS } else { self.iterations };
                let _ = derive(&cred.secret, &[0u8; SALT_LEN], iterations);
                Err(AuthError::AuthFailed)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, AuthError> {
        let mut store = CredentialStore::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: &str| AuthError::BadFile {
                line: i + 1,
                message: message.to_string(),
            };
            let parts: Vec<&str> = line.split(':').collect();
            let [user, role, iters, salt, hash] = parts[..] else {
                return Err(bad("expected user:role:iterations:salt:hash"));
            };
            let role = match role {
                "operator" => Role::Operator,
                "readonly" => Role::ReadOnly,
                _ => return Err(bad("unknown role")),
            };
            let entry = Entry {
                role,
                iterations: iters.parse().map_err(|_| bad("bad iteration count"))?,
                salt: hex::decode(salt).map_err(|_| bad("bad salt"))?,
                hash: hex::decode(hash).map_err(|_| bad("bad hash"))?,
            };
            store.users.insert(user.to_string(), entry);
        }
        Ok(store)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (user, e) in &self.users {
            out.push_str(&format!(
                "{user}:{}:{}:{}:{}\n",
                e.role.as_str(),
                e.iterations,
                hex::encode(&e.salt),
                hex::encode(&e.hash)
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, AuthError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), AuthError> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// A fresh 128-bit passkey as 32 lowercase hex characters.
pub fn new_passkey() -> String {
    let mut bytes = [0u8; 16];
    OsRng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

/// Constant-time passkey comparison.
pub fn passkey_matches(active: &str, offered: &str) -> bool {
    bool::from(active.as_bytes().ct_eq(offered.as_bytes()))
}
