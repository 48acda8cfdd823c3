use std::collections::HashMap;

use gridforge_core::UserId;

use crate::config::{Role, TokenEntry};

pub const ADMIN_USER: &str = "admin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Admin(UserId),
    User(UserId),
    Agent,
}

impl Principal {
    pub fn is_admin(&self) -> bool {
        matches!(self, Principal::Admin(_))
    }

    /// The acting user; agents act as nobody.
    pub fn user(&self) -> Option<&UserId> {
        match self {
            Principal::Admin(u) | Principal::User(u) => Some(u),
            Principal::Agent => None,
        }
    }
}

/// Static bearer-token table.
#[derive(Clone, Default)]
pub struct TokenTable {
    by_token: HashMap<String, Principal>,
}

impl TokenTable {
    pub fn new(entries: &[TokenEntry]) -> Self {
        let by_token = entries
            .iter()
            .map(|e| {
                let p = match e.role {
                    Role::Admin => {
                        Principal::Admin(UserId::new(e.user.clone().unwrap_or_else(|| ADMIN_USER.into())))
                    }
                    Role::User => Principal::User(UserId::new(e.user.clone().unwrap_or_default())),
                    Role::Agent => Principal::Agent,
                };
                (e.token.clone(), p)
            })
            .collect();
        TokenTable { by_token }
    }

    pub fn resolve(&self, authorization: Option<&str>) -> Option<Principal> {
        let token = authorization?.strip_prefix("Bearer ")?.trim();
        self.by_token.get(token).cloned()
    }
}
