//! Directional, per-capability permission grants between applications.
//!
//! Every cross-app exchange is default-deny: it is allowed only when a
//! matching unrevoked grant `(source, target, capability)` exists. A grant
//! for one capability never enables another, and `A -> B` says nothing about
//! `B -> A`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::RwLock;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

macro_rules! string_id {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self> {
                let id = id.into();
                if id.is_empty() || id.contains(':') || id.chars().any(char::is_whitespace) {
                    return Err(Error::Config(format!(concat!("invalid ", $what, " id {:?}"), id)));
                }
                Ok(Self(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(AppId, "app");
string_id!(GroupId, "group");

/// Where a grant points, and what a model or pool belongs to: a single app
/// or a group of apps. Rendered as `app:<id>` / `group:<id>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    App(AppId),
    Group(GroupId),
}

impl Scope {
    pub fn app(id: &str) -> Result<Self> {
        Ok(Scope::App(AppId::new(id)?))
    }

    pub fn group(id: &str) -> Result<Self> {
        Ok(Scope::Group(GroupId::new(id)?))
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::App(a) => write!(f, "app:{a}"),
            Scope::Group(g) => write!(f, "group:{g}"),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("app", id)) => Scope::app(id),
            Some(("group", id)) => Scope::group(id),
            _ => Err(Error::Config(format!("scope {s:?} is not app:<id> or group:<id>"))),
        }
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Capability {
    ShareData,
    ShareGradient,
    ShareModel,
    ReadGlobalModel,
}

impl Capability {
    pub const ALL: [Capability; 4] = [
        Capability::ShareData,
        Capability::ShareGradient,
        Capability::ShareModel,
        Capability::ReadGlobalModel,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionGrant {
    pub source: AppId,
    pub target: Scope,
    pub capability: Capability,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub granted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allowed,
    Denied,
}

impl Decision {
    pub fn is_allowed(self) -> bool {
        self == Decision::Allowed
    }
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

type GrantKey = (AppId, Scope, Capability);

/// Registered apps and groups plus the grants between them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "RegistryDoc", into = "RegistryDoc")]
pub struct PermissionRegistry {
    apps: BTreeSet<AppId>,
    groups: BTreeMap<GroupId, BTreeSet<AppId>>,
    grants: BTreeMap<GrantKey, u64>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    apps: Vec<AppId>,
    groups: BTreeMap<GroupId, Vec<AppId>>,
    grants: Vec<PermissionGrant>,
}

impl From<PermissionRegistry> for RegistryDoc {
    fn from(r: PermissionRegistry) -> Self {
        let grants = r.grants().collect();
        RegistryDoc {
            apps: r.apps.into_iter().collect(),
            groups: r
                .groups
                .into_iter()
                .map(|(g, m)| (g, m.into_iter().collect()))
                .collect(),
            grants,
        }
    }
}

impl From<RegistryDoc> for PermissionRegistry {
    fn from(d: RegistryDoc) -> Self {
        PermissionRegistry {
            apps: d.apps.into_iter().collect(),
            groups: d
                .groups
                .into_iter()
                .map(|(g, m)| (g, m.into_iter().collect()))
                .collect(),
            grants: d
                .grants
                .into_iter()
                .map(|g| ((g.source, g.target, g.capability), g.granted_at))
                .collect(),
        }
    }
}

impl PermissionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an app. Re-registering an existing id is a no-op.
    pub fn register_app(&mut self, app: AppId) {
        self.apps.insert(app);
    }

    /// Registers a group of already-registered apps.
    pub fn register_group(&mut self, group: GroupId, members: impl IntoIterator<Item = AppId>) -> Result<()> {
        let members: BTreeSet<AppId> = members.into_iter().collect();
        if members.is_empty() {
            return Err(Error::Registry(format!("group {group} has no members")));
        }
        if let Some(unknown) = members.iter().find(|m| !self.apps.contains(*m)) {
            return Err(Error::Registry(format!("group member {unknown} is not registered")));
        }
        match self.groups.get(&group) {
            Some(existing) if *existing != members => Err(Error::Registry(format!(
                "group {group} already registered with other members"
            ))),
            _ => {
                self.groups.insert(group, members);
                Ok(())
            }
        }
    }

    pub fn is_registered(&self, app: &AppId) -> bool {
        self.apps.contains(app)
    }

    pub fn apps(&self) -> impl Iterator<Item = &AppId> {
        self.apps.iter()
    }

    pub fn group_members(&self, group: &GroupId) -> Option<&BTreeSet<AppId>> {
        self.groups.get(group)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&GroupId, &BTreeSet<AppId>)> {
        self.groups.iter()
    }

    pub fn knows_scope(&self, scope: &Scope) -> bool {
        match scope {
            Scope::App(a) => self.apps.contains(a),
            Scope::Group(g) => self.groups.contains_key(g),
        }
    }

    /// Apps that make up `scope`.
    pub fn scope_members(&self, scope: &Scope) -> Vec<AppId> {
        match scope {
            Scope::App(a) => vec![a.clone()],
            Scope::Group(g) => self
                .groups
                .get(g)
                .map(|m| m.iter().cloned().collect())
                .unwrap_or_default(),
        }
    }

    fn validate(&self, source: &AppId, target: &Scope) -> Result<()> {
        if !self.apps.contains(source) {
            return Err(Error::Registry(format!("unknown app {source}")));
        }
        if !self.knows_scope(target) {
            return Err(Error::Registry(format!("unknown target {target}")));
        }
        Ok(())
    }

    pub fn grant(&mut self, source: &AppId, target: &Scope, capability: Capability) -> Result<PermissionGrant> {
        self.grant_at(source, target, capability, now_millis())
    }

    /// Records a grant. Repeating an existing grant keeps its original
    /// timestamp.
    pub fn grant_at(
        &mut self,
        source: &AppId,
        target: &Scope,
        capability: Capability,
        granted_at: u64,
    ) -> Result<PermissionGrant> {
        self.validate(source, target)?;
        let key = (source.clone(), target.clone(), capability);
        let granted_at = *self.grants.entry(key).or_insert(granted_at);
        Ok(PermissionGrant {
            source: source.clone(),
            target: target.clone(),
            capability,
            granted_at,
        })
    }

    /// Applies every grant or none of them.
    pub fn grant_all(&mut self, grants: &[PermissionGrant]) -> Result<()> {
        for g in grants {
            self.validate(&g.source, &g.target)?;
        }
        for g in grants {
            let ts = if g.granted_at == 0 { now_millis() } else { g.granted_at };
            self.grant_at(&g.source, &g.target, g.capability, ts)?;
        }
        Ok(())
    }

    pub fn check(&self, source: &AppId, target: &Scope, capability: Capability) -> Decision {
        let key = (source.clone(), target.clone(), capability);
        if self.grants.contains_key(&key) {
            Decision::Allowed
        } else {
            Decision::Denied
        }
    }

    /// Shorthand for `check(..).is_allowed()`, turned into a permission error.
    pub fn require(&self, source: &AppId, target: &Scope, capability: Capability) -> Result<()> {
        if self.check(source, target, capability).is_allowed() {
            Ok(())
        } else {
            Err(Error::Permission(format!("{source} -> {target} lacks {capability:?}")))
        }
    }

    pub fn revoke(&mut self, source: &AppId, target: &Scope, capability: Capability) {
        self.grants.remove(&(source.clone(), target.clone(), capability));
    }

    pub fn grants(&self) -> impl Iterator<Item = PermissionGrant> + '_ {
        self.grants.iter().map(|((s, t, c), ts)| PermissionGrant {
            source: s.clone(),
            target: t.clone(),
            capability: *c,
            granted_at: *ts,
        })
    }
}

/// A registry shared between threads: checks run concurrently, grants and
/// revocations are serialized.
#[derive(Debug, Clone, Default)]
pub struct SharedRegistry(Arc<RwLock<PermissionRegistry>>);

impl SharedRegistry {
    pub fn new(registry: PermissionRegistry) -> Self {
        Self(Arc::new(RwLock::new(registry)))
    }

    pub fn check(&self, source: &AppId, target: &Scope, capability: Capability) -> Decision {
        self.0.read().check(source, target, capability)
    }

    pub fn grant(&self, source: &AppId, target: &Scope, capability: Capability) -> Result<PermissionGrant> {
        self.0.write().grant(source, target, capability)
    }

    pub fn grant_all(&self, grants: &[PermissionGrant]) -> Result<()> {
        self.0.write().grant_all(grants)
    }

    pub fn revoke(&self, source: &AppId, target: &Scope, capability: Capability) {
        self.0.write().revoke(source, target, capability)
    }

    pub fn snapshot(&self) -> PermissionRegistry {
        self.0.read().clone()
    }
}
