//! Users, credential verification and bearer-token sessions.

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use chrono::{DateTime, Duration, Utc};
use rand::rngs::OsRng;
use rand::TryRngCore;
use serde::{Deserialize, Serialize};

use crate::config::HashParams;
use crate::context::{Role, UserRecord};
use crate::error::{Error, ErrorCode, Result};
use crate::ids::{new_secret, secret_digest};
use crate::store::RecordKind;
use crate::ControlPlane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthSession {
    /// SHA-256 of the bearer token.
    pub token_digest: String,
    pub user_id: crate::ids::Id,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

/// A freshly issued login. The token is only ever returned here.
#[derive(Clone, Serialize, Deserialize)]
pub struct LoginGrant {
    pub token: String,
    pub user_id: crate::ids::Id,
    pub role: Role,
    pub expires_at: DateTime<Utc>,
}

impl std::fmt::Debug for LoginGrant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoginGrant")
            .field("user_id", &self.user_id)
            .field("expires_at", &self.expires_at)
            .finish_non_exhaustive()
    }
}

fn hasher(params: HashParams) -> Argon2<'static> {
    let params = Params::new(params.memory_kib, params.iterations, params.parallelism, None)
        .expect("valid argon2 parameters");
    Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
}

pub fn hash_credential(credential: &str, params: HashParams) -> Result<String> {
    let mut salt_bytes = [0u8; 16];
    OsRng.try_fill_bytes(&mut salt_bytes).expect("OS entropy source");
    let salt = SaltString::encode_b64(&salt_bytes).map_err(|e| Error::new(ErrorCode::Internal, e.to_string()))?;
    hasher(params)
        .hash_password(credential.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| Error::new(ErrorCode::Internal, e.to_string()))
}

pub fn verify_credential(credential: &str, stored: &str) -> bool {
    let Ok(parsed) = PasswordHash::new(stored) else {
        return false;
    };
    // Parameters are read back from the PHC string.
    Argon2::default()
        .verify_password(credential.as_bytes(), &parsed)
        .is_ok()
}

fn invalid_credentials() -> Error {
    Error::new(ErrorCode::InvalidCredentials, "invalid username or password")
}

pub struct Auth<'a> {
    pub(crate) plane: &'a ControlPlane,
}

impl Auth<'_> {
    pub fn create_user(&self, username: &str, credential: &str, role: Role) -> Result<UserRecord> {
        let username = username.trim();
        let mut missing = Vec::new();
        if username.is_empty() {
            missing.push("username".to_string());
        }
        if credential.is_empty() {
            missing.push("credential".to_string());
        }
        if !missing.is_empty() {
            return Err(Error::new(ErrorCode::Validation, "missing fields").with_details(missing));
        }
        let credential_hash = hash_credential(credential, self.plane.config.password_hash)?;
        let user_id = self.plane.ids.next_id();
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            if tx.user_by_name(username).is_some() {
                return Err(Error::new(ErrorCode::Duplicate, format!("user {username:?} exists")));
            }
            let rec = UserRecord {
                user_id,
                username: username.to_string(),
                credential_hash,
                role,
                created_at: now,
            };
            tx.put(rec.clone());
            Ok(rec)
        })
    }

    /// Verifies credentials and issues a bearer token. Unknown users and
    /// wrong passwords produce the same error and do the same hashing work.
    pub fn login(&self, username: &str, credential: &str) -> Result<LoginGrant> {
        let user = self.plane.store.read(|s| s.user_by_name(username).cloned());
        let stored = match &user {
            Some(u) => u.credential_hash.clone(),
            None => self.plane.dummy_hash.clone(),
        };
        let ok = verify_credential(credential, &stored);
        let Some(user) = user.filter(|_| ok) else {
            return Err(invalid_credentials());
        };
        let token = new_secret();
        let now = self.plane.clock.now();
        let session = AuthSession {
            token_digest: secret_digest(&token),
            user_id: user.user_id.clone(),
            issued_at: now,
            expires_at: now + Duration::seconds(self.plane.config.token_ttl_s),
        };
        let expires_at = session.expires_at;
        self.plane.store.write(|tx| {
            tx.put(session);
            Ok(())
        })?;
        Ok(LoginGrant {
            token,
            user_id: user.user_id,
            role: user.role,
            expires_at,
        })
    }

    /// Resolves a bearer token to its user, rejecting expired or revoked
    /// tokens.
    pub fn authenticate(&self, token: &str) -> Result<UserRecord> {
        let digest = secret_digest(token);
        let now = self.plane.clock.now();
        self.plane.store.read(|s| {
            let session = s
                .auth_sessions
                .get(&digest)
                .filter(|a| a.expires_at > now)
                .ok_or_else(|| Error::new(ErrorCode::Unauthorized, "missing, expired or revoked token"))?;
            s.users
                .get(&session.user_id)
                .cloned()
                .ok_or_else(|| Error::new(ErrorCode::Unauthorized, "token user no longer exists"))
        })
    }

    pub fn logout(&self, token: &str) -> Result<()> {
        let digest = secret_digest(token);
        self.plane.store.write(|tx| {
            tx.remove(RecordKind::Auth, &digest);
            Ok(())
        })
    }

    /// Drops expired sessions.
    pub(crate) fn purge_expired(&self, now: DateTime<Utc>) -> Result<usize> {
        self.plane.store.write(|tx| {
            let expired: Vec<String> = tx
                .auth_sessions
                .values()
                .filter(|a| a.expires_at <= now)
                .map(|a| a.token_digest.clone())
                .collect();
            for d in &expired {
                tx.remove(RecordKind::Auth, d);
            }
            Ok(expired.len())
        })
    }
}
