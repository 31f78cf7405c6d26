//! Seeded user-behaviour log generator, sessionizer, and the flow/session join
//! that produces the synergistic role-labelled dataset.
//!
//! Normal users log on during working hours and perform a handful of small
//! file, mail, web and device events. Malicious users additionally have some
//! sessions carrying one injected anomaly: an off-hours burst, mass file
//! access, or an exfiltration-scale upload from a new device and location.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AttackClass, Column, ColumnKind, InsiderLabel, LabelMap, LoadedDataset, Role, RoleMap};
use crate::preprocess::{flow_classes, RawTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Logon,
    Logoff,
    FileAccess,
    Email,
    Device,
    Http,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventAttrs {
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub recipients: u32,
    pub device: u32,
    pub new_device: bool,
    pub geo_change: bool,
    /// Set on events belonging to an injected anomaly.
    pub injected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub user: u32,
    pub session: u32,
    pub kind: EventKind,
    /// Seconds since the start of the simulated period.
    pub timestamp: u64,
    pub attrs: EventAttrs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub normal: f64,
    pub malicious: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix {
            normal: 0.9,
            malicious: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UebaConfig {
    pub n_users: usize,
    pub sessions_per_user: usize,
    pub mix: ScenarioMix,
    /// Share of a malicious user's sessions that carry an anomaly (at least one).
    pub anomaly_session_fraction: f64,
    pub seed: u64,
}

impl Default for UebaConfig {
    fn default() -> Self {
        UebaConfig {
            n_users: 200,
            sessions_per_user: 30,
            mix: ScenarioMix::default(),
            anomaly_session_fraction: 0.5,
            seed: 0,
        }
    }
}

impl UebaConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.mix;
        if m.normal < 0.0 || m.malicious < 0.0 || ((m.normal + m.malicious) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "scenario mix ({}, {}) must be non-negative and sum to 1",
                m.normal, m.malicious
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly_session_fraction) {
            return Err(Error::Config("anomaly session fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn malicious_users(&self) -> usize {
        ((self.mix.malicious * self.n_users as f64).round() as usize).min(self.n_users)
    }
}

const DAY: u64 = 86_400;
const HOUR: u64 = 3_600;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Anomaly {
    OffHoursBurst,
    MassFileAccess,
    Exfiltration,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Which users are malicious: a seeded choice of exactly `round(frac * n)` ids.
fn malicious_set(cfg: &UebaConfig) -> BTreeSet<u32> {
    let mut ids: Vec<u32> = (0..cfg.n_users as u32).collect();
    ids.shuffle(&mut rng_for(cfg.seed, u64::MAX));
    ids.into_iter().take(cfg.malicious_users()).collect()
}

/// Generates every user's events, grouped by user and in time order.
pub fn generate_users(cfg: &UebaConfig) -> Result<Vec<BehaviorRecord>> {
    cfg.validate()?;
    let bad = malicious_set(cfg);
    let mut out = Vec::new();
    for user in 0..cfg.n_users as u32 {
        let mut rng = rng_for(cfg.seed, user as u64);
        let n_devices = rng.random_range(1..=2u32);
        let anomalous: BTreeSet<usize> = if bad.contains(&user) && cfg.sessions_per_user > 0 {
            let k = ((cfg.anomaly_session_fraction * cfg.sessions_per_user as f64).round() as usize)
                .clamp(1, cfg.sessions_per_user);
            let mut s: Vec<usize> = (0..cfg.sessions_per_user).collect();
            s.shuffle(&mut rng);
            s.into_iter().take(k).collect()
        } else {
            BTreeSet::new()
        };
        for session in 0..cfg.sessions_per_user {
            let anomaly = anomalous.contains(&session).then(|| match rng.random_range(0..3) {
                0 => Anomaly::OffHoursBurst,
                1 => Anomaly::MassFileAccess,
                _ => Anomaly::Exfiltration,
            });
            gen_session(&mut rng, user, session as u32, n_devices, anomaly, &mut out);
        }
    }
    Ok(out)
}

fn gen_session(
    rng: &mut ChaCha8Rng,
    user: u32,
    session: u32,
    n_devices: u32,
    anomaly: Option<Anomaly>,
    out: &mut Vec<BehaviorRecord>,
) {
    let day = session as u64 * DAY;
    let hour = match anomaly {
        Some(Anomaly::OffHoursBurst) => *[1u64, 2, 3, 4, 22].choose(rng).unwrap(),
        _ => rng.random_range(8..=16),
    };
    let mut t = day + hour * HOUR + rng.random_range(0..HOUR);
    let mut push = |kind, t: u64, attrs| {
        out.push(BehaviorRecord {
            user,
            session,
            kind,
            timestamp: t,
            attrs,
        })
    };
    let injected = anomaly == Some(Anomaly::OffHoursBurst);
    push(EventKind::Logon, t, EventAttrs { injected, ..Default::default() });

    let routine = rng.random_range(2..=10);
    for _ in 0..routine {
        t += rng.random_range(30..=300);
        let (kind, attrs) = routine_event(rng, n_devices);
        push(kind, t, EventAttrs { injected, ..attrs });
    }

    match anomaly {
        None => {}
        Some(Anomaly::OffHoursBurst) => {
            for _ in 0..rng.random_range(30..=60) {
                t += rng.random_range(1..=30);
                let (kind, attrs) = routine_event(rng, n_devices);
                push(kind, t, EventAttrs { injected: true, ..attrs });
            }
        }
        Some(Anomaly::MassFileAccess) => {
            for _ in 0..rng.random_range(80..=200) {
                t += rng.random_range(1..=20);
                let attrs = EventAttrs {
                    download_bytes: rng.random_range(1_000_000..=20_000_000),
                    injected: true,
                    ..Default::default()
                };
                push(EventKind::FileAccess, t, attrs);
            }
        }
        Some(Anomaly::Exfiltration) => {
            for _ in 0..rng.random_range(2..=5) {
                t += rng.random_range(30..=120);
                let attrs = EventAttrs {
                    upload_bytes: rng.random_range(200_000_000..=2_000_000_000),
                    device: n_devices + rng.random_range(0..3),
                    new_device: true,
                    geo_change: true,
                    injected: true,
                    ..Default::default()
                };
                let kind = *[EventKind::Device, EventKind::Http].choose(rng).unwrap();
                push(kind, t, attrs);
            }
        }
    }
    t += rng.random_range(30..=300);
    push(EventKind::Logoff, t, EventAttrs { injected, ..Default::default() });
}

fn routine_event(rng: &mut ChaCha8Rng, n_devices: u32) -> (EventKind, EventAttrs) {
    match rng.random_range(0..4) {
        0 => (
            EventKind::FileAccess,
            EventAttrs {
                download_bytes: rng.random_range(1_000..=100_000),
                ..Default::default()
            },
        ),
        1 => (
            EventKind::Email,
            EventAttrs {
                recipients: rng.random_range(1..=4),
                upload_bytes: rng.random_range(0..=50_000),
                ..Default::default()
            },
        ),
        2 => (
            EventKind::Http,
            EventAttrs {
                download_bytes: rng.random_range(500..=200_000),
                upload_bytes: rng.random_range(0..=20_000),
                ..Default::default()
            },
        ),
        _ => (
            EventKind::Device,
            EventAttrs {
                device: rng.random_range(0..n_devices),
                ..Default::default()
            },
        ),
    }
}

pub const SESSION_FEATURES: [&str; 12] = [
    "logon_hour",
    "off_hours_ratio",
    "event_count",
    "distinct_devices",
    "file_ops",
    "upload_bytes",
    "download_bytes",
    "email_count",
    "email_recipients",
    "http_count",
    "new_device",
    "geo_change",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionFeatures {
    pub user: u32,
    pub session: u32,
    pub values: Vec<f64>,
    pub label: InsiderLabel,
}

fn is_off_hours(ts: u64) -> bool {
    let h = (ts % DAY) / HOUR;
    !(7..20).contains(&h)
}

/// One feature vector per `(user, session)` run of consecutive records.
pub fn sessionize(records: &[BehaviorRecord]) -> Vec<SessionFeatures> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let key = (records[start].user, records[start].session);
        let mut end = start + 1;
        while end < records.len() && (records[end].user, records[end].session) == key {
            end += 1;
        }
        out.push(session_features(&records[start..end]));
        start = end;
    }
    out
}

fn session_features(events: &[BehaviorRecord]) -> SessionFeatures {
    let first = &events[0];
    let mut v = [0.0f64; 12];
    v[0] = ((first.timestamp % DAY) / HOUR) as f64;
    v[1] = events.iter().filter(|e| is_off_hours(e.timestamp)).count() as f64 / events.len() as f64;
    v[2] = events.len() as f64;
    let devices: BTreeSet<u32> = events
        .iter()
        .filter(|e| e.kind == EventKind::Device)
        .map(|e| e.attrs.device)
        .collect();
    v[3] = devices.len() as f64;
    for e in events {
        let a = &e.attrs;
        v[5] += a.upload_bytes as f64;
        v[6] += a.download_bytes as f64;
        match e.kind {
            EventKind::FileAccess => v[4] += 1.0,
            EventKind::Email => {
                v[7] += 1.0;
                v[8] += a.recipients as f64;
            }
            EventKind::Http => v[9] += 1.0,
            _ => {}
        }
        if a.new_device {
            v[10] = 1.0;
        }
        if a.geo_change {
            v[11] = 1.0;
        }
    }
    let label = if events.iter().any(|e| e.attrs.injected) {
        InsiderLabel::InsiderMalicious
    } else {
        InsiderLabel::Normal
    };
    SessionFeatures {
        user: first.user,
        session: first.session,
        values: v.to_vec(),
        label,
    }
}

/// A flow's feature cells (label removed) and its attack class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFlow {
    pub cells: Vec<String>,
    pub class: AttackClass,
}

pub fn labeled_flows(ds: &LoadedDataset, map: &LabelMap) -> Result<Vec<LabeledFlow>> {
    let classes = flow_classes(ds, map)?;
    let li = ds.schema.label_index();
    Ok(ds
        .records
        .iter()
        .zip(classes)
        .map(|(r, class)| LabeledFlow {
            cells: r.values.iter().enumerate().filter(|&(i, _)| i != li).map(|(_, v)| v.clone()).collect(),
            class,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinPolicy {
    /// Share of benign flows paired with an insider-malicious session.
    pub insider_fraction: f64,
    pub allow_recycle: bool,
}

impl Default for JoinPolicy {
    fn default() -> Self {
        JoinPolicy {
            insider_fraction: 0.25,
            allow_recycle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynergisticRecord {
    pub flow: Vec<String>,
    pub session: Vec<f64>,
    pub class: AttackClass,
    pub insider: InsiderLabel,
    pub role: Role,
}

struct Stratum<'a> {
    name: &'static str,
    pool: Vec<&'a SessionFeatures>,
    order: Vec<usize>,
    next: usize,
    recycled: bool,
}

impl<'a> Stratum<'a> {
    fn new(name: &'static str, pool: Vec<&'a SessionFeatures>, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(rng);
        Stratum {
            name,
            pool,
            order,
            next: 0,
            recycled: false,
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> &'a SessionFeatures {
        if self.next == self.order.len() {
            if !self.recycled {
                log::warn!("{} session stratum exhausted; recycling", self.name);
                self.recycled = true;
            }
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.pool[self.order[self.next - 1]]
    }
}

/// Pairs every flow with a behaviour session and assigns its role.
///
/// Attack flows draw from normal sessions. Benign flows draw from
/// insider-malicious sessions for a quota of `round(insider_fraction * benign)`
/// seeded picks and from normal sessions otherwise. Flows whose role is
/// [`Role::Excluded`] are dropped before pairing.
pub fn join_synergistic(
    flows: &[LabeledFlow],
    sessions: &[SessionFeatures],
    roles: &RoleMap,
    policy: &JoinPolicy,
    seed: u64,
) -> Result<Vec<SynergisticRecord>> {
    if flows.is_empty() || sessions.is_empty() {
        return Err(Error::Data("join needs at least one flow and one session".into()));
    }
    if !(0.0..=1.0).contains(&policy.insider_fraction) {
        return Err(Error::Config("insider fraction outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut benign = Vec::new();
    let mut kept = Vec::new();
    for (i, f) in flows.iter().enumerate() {
        if f.class == AttackClass::Benign {
            benign.push(i);
            kept.push(i);
        } else if roles.role_of_pair(f.class, InsiderLabel::Normal)? != Role::Excluded {
            kept.push(i);
        }
    }
    benign.shuffle(&mut rng);
    let n_insider = (policy.insider_fraction * benign.len() as f64).round() as usize;
    let mut insider_flow = vec![false; flows.len()];
    for &i in &benign[..n_insider] {
        insider_flow[i] = true;
    }

    let normal_pool: Vec<&SessionFeatures> = sessions.iter().filter(|s| s.label == InsiderLabel::Normal).collect();
    let bad_pool: Vec<&SessionFeatures> = sessions.iter().filter(|s| s.label != InsiderLabel::Normal).collect();
    let need_bad = n_insider;
    let need_normal = kept.len() - n_insider;
    for (name, need, have) in [("normal", need_normal, normal_pool.len()), ("insider-malicious", need_bad, bad_pool.len())] {
        if need > have && (!policy.allow_recycle || have == 0) {
            return Err(Error::StarvedStratum {
                stratum: name.to_string(),
                needed: need,
                available: have,
            });
        }
    }
    let mut normal = Stratum::new("normal", normal_pool, &mut rng);
    let mut bad = Stratum::new("insider-malicious", bad_pool, &mut rng);

    let mut out = Vec::with_capacity(kept.len());
    for i in kept {
        let f = &flows[i];
        let s = if insider_flow[i] { bad.draw(&mut rng) } else { normal.draw(&mut rng) };
        let role = roles.role_of_pair(f.class, s.label)?;
        if role == Role::Excluded {
            continue;
        }
        out.push(SynergisticRecord {
            flow: f.cells.clone(),
            session: s.values.clone(),
            class: f.class,
            insider: s.label,
            role,
        });
    }
    Ok(out)
}

/// Column layout of the joined table: `flow_*` then `ueba_*`.
pub fn synergistic_columns(flow_columns: &[Column]) -> Vec<Column> {
    flow_columns
        .iter()
        .map(|c| Column::new(format!("flow_{}", c.name), c.kind))
        .chain(SESSION_FEATURES.iter().map(|n| Column::new(format!("ueba_{n}"), ColumnKind::Numeric)))
        .collect()
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Comma-separated text with a header; one row per record.
pub fn write_synergistic_csv(flow_columns: &[Column], records: &[SynergisticRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = synergistic_columns(flow_columns).into_iter().map(|c| c.name).collect();
    header.push("class".into());
    header.push("role".into());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        let row = r
            .flow
            .iter()
            .cloned()
            .chain(r.session.iter().map(|&v| fmt_num(v)))
            .chain([r.class.to_string(), r.role.to_string()]);
        w.write_record(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<synergistic csv>", e))
}

/// Role-task table over the four detected roles.
pub fn role_table(flow_columns: &[Column], records: &[SynergisticRecord], sources: Vec<String>) -> Result<RawTable> {
    let labels = records
        .iter()
        .map(|r| {
            Role::DETECTED
                .iter()
                .position(|&x| x == r.role)
                .ok_or_else(|| Error::UnmappedRole(r.role.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawTable {
        columns: synergistic_columns(flow_columns),
        rows: records
            .iter()
            .map(|r| r.flow.iter().cloned().chain(r.session.iter().map(|&v| fmt_num(v))).collect())
            .collect(),
        labels,
        class_names: Role::DETECTED.iter().map(|r| r.to_string()).collect(),
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> UebaConfig {
        UebaConfig {
            n_users: 20,
            sessions_per_user: 6,
            mix: ScenarioMix {
                normal: 0.8,
                malicious: 0.2,
            },
            anomaly_session_fraction: 0.5,
            seed,
        }
    }

    fn ev(session: u32, kind: EventKind, ts: u64, attrs: EventAttrs) -> BehaviorRecord {
        BehaviorRecord {
            user: 1,
            session,
            kind,
            timestamp: ts,
            attrs,
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_users(&small(3)).unwrap();
        let b = generate_users(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_users(&small(4)).unwrap());
    }

    #[test]
    fn timestamps_monotone_per_user() {
        let recs = generate_users(&small(1)).unwrap();
        for w in recs.windows(2) {
            if w[0].user == w[1].user {
                assert!(w[0].timestamp <= w[1].timestamp);
                assert!(w[0].session <= w[1].session);
            }
        }
    }

    #[test]
    fn malicious_quota_is_exact() {
        let cfg = UebaConfig {
            n_users: 100,
            sessions_per_user: 4,
            mix: ScenarioMix {
                normal: 0.95,
                malicious: 0.05,
            },
            ..UebaConfig::default()
        };
        let recs = generate_users(&cfg).unwrap();
        let users: BTreeSet<u32> = recs.iter().filter(|r| r.attrs.injected).map(|r| r.user).collect();
        assert_eq!(users.len(), 5);
    }

    #[test]
    fn all_normal_mix_has_no_insiders() {
        let cfg = UebaConfig {
            mix: ScenarioMix {
                normal: 1.0,
                malicious: 0.0,
            },
            ..small(2)
        };
        let s = sessionize(&generate_users(&cfg).unwrap());
        assert_eq!(s.len(), 120);
        assert!(s.iter().all(|x| x.label == InsiderLabel::Normal));
    }

    #[test]
    fn bad_mix_and_zero_users() {
        let mut cfg = small(0);
        cfg.mix.normal = 0.5;
        assert!(matches!(generate_users(&cfg), Err(Error::Config(_))));
        let cfg = UebaConfig { n_users: 0, ..small(0) };
        assert!(generate_users(&cfg).unwrap().is_empty());
    }

    #[test]
    fn logon_logoff_session() {
        let s = sessionize(&[
            ev(0, EventKind::Logon, 9 * HOUR, EventAttrs::default()),
            ev(0, EventKind::Logoff, 10 * HOUR, EventAttrs::default()),
        ]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].values[2], 2.0);
        assert_eq!(s[0].values[5], 0.0);
        assert_eq!(s[0].values[6], 0.0);
        assert_eq!(s[0].label, InsiderLabel::Normal);
    }

    #[test]
    fn hand_built_session() {
        let s = sessionize(&[
            ev(3, EventKind::Logon, DAY + 21 * HOUR, EventAttrs::default()),
            ev(
                3,
                EventKind::Email,
                DAY + 21 * HOUR + 60,
                EventAttrs {
                    recipients: 3,
                    upload_bytes: 100,
                    ..Default::default()
                },
            ),
            ev(
                3,
                EventKind::Device,
                DAY + 21 * HOUR + 90,
                EventAttrs {
                    device: 7,
                    upload_bytes: 5_000,
                    new_device: true,
                    injected: true,
                    ..Default::default()
                },
            ),
        ]);
        let v = &s[0].values;
        assert_eq!(v, &vec![21.0, 1.0, 3.0, 1.0, 0.0, 5100.0, 0.0, 1.0, 3.0, 0.0, 1.0, 0.0]);
        assert_eq!(s[0].label, InsiderLabel::InsiderMalicious);
    }

    #[test]
    fn sessions_nonnegative_and_fixed_width() {
        let s = sessionize(&generate_users(&small(5)).unwrap());
        assert!(s.iter().all(|x| x.values.len() == 12 && x.values.iter().all(|v| v.is_finite() && *v >= 0.0)));
        assert!(s.iter().any(|x| x.label == InsiderLabel::InsiderMalicious));
    }

    fn flows() -> Vec<LabeledFlow> {
        let mk = |c| LabeledFlow {
            cells: vec!["1".into(), "tcp".into()],
            class: c,
        };
        let mut v = Vec::new();
        for _ in 0..40 {
            v.push(mk(AttackClass::Benign));
        }
        for c in [AttackClass::Probe, AttackClass::R2L, AttackClass::U2R, AttackClass::DoS] {
            for _ in 0..5 {
                v.push(mk(c));
            }
        }
        v
    }

    #[test]
    fn join_policy_counts() {
        let sessions = sessionize(&generate_users(&small(7)).unwrap());
        let policy = JoinPolicy {
            insider_fraction: 0.25,
            allow_recycle: false,
        };
        let out = join_synergistic(&flows(), &sessions, &RoleMap::default(), &policy, 1).unwrap();
        assert_eq!(out.len(), 55);
        let count = |r| out.iter().filter(|x| x.role == r).count();
        assert_eq!(count(Role::MaliciousUser), 10);
        assert_eq!(count(Role::NormalUser), 30);
        assert_eq!(count(Role::Intruder), 10);
        assert_eq!(count(Role::PotentialIntruder), 5);
        for r in &out {
            if r.class != AttackClass::Benign {
                assert_eq!(r.insider, InsiderLabel::Normal);
            }
            if r.class == AttackClass::Benign && r.insider == InsiderLabel::Normal {
                assert_eq!(r.role, Role::NormalUser);
            }
            assert_eq!(r.flow.len() + r.session.len(), 14);
        }
        let again = join_synergistic(&flows(), &sessions, &RoleMap::default(), &policy, 1).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn starved_stratum_is_named() {
        let sessions: Vec<SessionFeatures> = sessionize(&generate_users(&small(7)).unwrap())
            .into_iter()
            .filter(|s| s.label == InsiderLabel::InsiderMalicious)
            .take(3)
            .chain(
                sessionize(&generate_users(&small(7)).unwrap())
                    .into_iter()
                    .filter(|s| s.label == InsiderLabel::Normal),
            )
            .collect();
        let policy = JoinPolicy {
            insider_fraction: 0.5,
            allow_recycle: false,
        };
        match join_synergistic(&flows(), &sessions, &RoleMap::default(), &policy, 0) {
            Err(Error::StarvedStratum { stratum, needed, available }) => {
                assert_eq!(stratum, "insider-malicious");
                assert_eq!((needed, available), (20, 3));
            }
            other => panic!("expected starvation, got {other:?}"),
        }
        let recycle = JoinPolicy {
            allow_recycle: true,
            ..policy
        };
        assert!(join_synergistic(&flows(), &sessions, &RoleMap::default(), &recycle, 0).is_ok());
    }

    #[test]
    fn csv_header_and_role_table() {
        let sessions = sessionize(&generate_users(&small(7)).unwrap());
        let cols = vec![Column::new("duration", ColumnKind::Numeric), Column::new("protocol_type", ColumnKind::Categorical)];
        let out = join_synergistic(&flows(), &sessions, &RoleMap::default(), &JoinPolicy::default(), 1).unwrap();
        let mut buf = Vec::new();
        write_synergistic_csv(&cols, &out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("flow_duration,flow_protocol_type,ueba_logon_hour,"));
        assert!(header.ends_with(",ueba_geo_change,class,role"));
        assert_eq!(text.lines().count(), out.len() + 1);
        let t = role_table(&cols, &out, vec![]).unwrap();
        assert_eq!(t.class_names.len(), 4);
        assert_eq!(t.columns.len(), 14);
    }
}
