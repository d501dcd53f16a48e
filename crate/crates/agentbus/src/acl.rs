use serde::{Deserialize, Serialize};

use crate::error::BusError;
use crate::types::{PayloadType, TypeSet};

/// Per-client type grants. `pollable` must be a subset of `readable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Permissions {
    pub appendable: TypeSet,
    pub readable: TypeSet,
    pub pollable: TypeSet,
}

impl Permissions {
    pub fn new(appendable: TypeSet, readable: TypeSet, pollable: TypeSet) -> Result<Self, BusError> {
        if !pollable.is_subset(readable) {
            return Err(BusError::InvalidPermissions(format!(
                "pollable {:?} is not a subset of readable {:?}",
                pollable, readable
            )));
        }
        Ok(Permissions {
            appendable,
            readable,
            pollable,
        })
    }

    pub fn all() -> Self {
        Permissions {
            appendable: TypeSet::all(),
            readable: TypeSet::all(),
            pollable: TypeSet::all(),
        }
    }

    pub fn none() -> Self {
        Permissions {
            appendable: TypeSet::empty(),
            readable: TypeSet::empty(),
            pollable: TypeSet::empty(),
        }
    }

    /// Read-only access to every type.
    pub fn observer() -> Self {
        Permissions {
            appendable: TypeSet::empty(),
            readable: TypeSet::all(),
            pollable: TypeSet::all(),
        }
    }

    pub fn can_append(&self, t: PayloadType) -> bool {
        self.appendable.contains(t)
    }

    pub fn can_read(&self, t: PayloadType) -> bool {
        self.readable.contains(t)
    }

    pub fn can_poll(&self, t: PayloadType) -> bool {
        self.pollable.contains(t)
    }
}

impl<'de> Deserialize<'de> for Permissions {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            appendable: TypeSet,
            #[serde(default)]
            readable: TypeSet,
            #[serde(default)]
            pollable: TypeSet,
        }
        let raw = Raw::deserialize(deserializer)?;
        Permissions::new(raw.appendable, raw.readable, raw.pollable)
            .map_err(serde::de::Error::custom)
    }
}

/// Who is calling, and what they may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientIdentity {
    pub client_id: String,
    pub permissions: Permissions,
}

impl ClientIdentity {
    pub fn new(client_id: impl Into<String>, permissions: Permissions) -> Self {
        ClientIdentity {
            client_id: client_id.into(),
            permissions,
        }
    }

    pub fn admin(client_id: impl Into<String>) -> Self {
        Self::new(client_id, Permissions::all())
    }

    pub(crate) fn check_append(&self, t: PayloadType) -> Result<(), BusError> {
        if self.permissions.can_append(t) {
            Ok(())
        } else {
            Err(self.denied("append", t))
        }
    }

    pub(crate) fn check_poll(&self, filter: TypeSet) -> Result<(), BusError> {
        if filter.is_empty() {
            return Err(BusError::EmptyFilter);
        }
        match filter.difference(self.permissions.pollable).iter().next() {
            Some(t) => Err(self.denied("poll", t)),
            None => Ok(()),
        }
    }

    fn denied(&self, op: &'static str, ty: PayloadType) -> BusError {
        BusError::PermissionDenied {
            client: self.client_id.clone(),
            op,
            ty,
        }
    }
}
