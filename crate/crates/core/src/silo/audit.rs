//! Isolation audit.
//!
//! Rule (a): every silo record carries the silo's data type, has that type's
//! vocabulary width, and only clinics hold outcomes.
//! Rule (b): every message that crossed a boundary is a well-formed parameter
//! file and none of its 64-bit words equals a local id.
//! Rule (c): local ids of different silos are disjoint. The crate exposes no
//! function from one silo's ids to another's; that half is structural.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::{ParamMessage, Sender, SiloId, SiloKind, SiloNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditRule {
    TypePurity,
    ParamsOnly,
    IdentitySeparation,
}

impl AuditRule {
    pub fn name(self) -> &'static str {
        match self {
            AuditRule::TypePurity => "a:type-purity",
            AuditRule::ParamsOnly => "b:params-only",
            AuditRule::IdentitySeparation => "c:identity-separation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditFinding {
    pub rule: AuditRule,
    pub silo: Option<u32>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub silos_checked: usize,
    pub records_checked: usize,
    pub messages_checked: usize,
    pub findings: Vec<AuditFinding>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "isolation audit: {verdict} ({} silos, {} records, {} messages)",
            self.silos_checked, self.records_checked, self.messages_checked
        );
        for rule in [AuditRule::TypePurity, AuditRule::ParamsOnly, AuditRule::IdentitySeparation] {
            let n = self.findings.iter().filter(|f| f.rule == rule).count();
            let _ = writeln!(
                s,
                "  rule {}: {}",
                rule.name(),
                if n == 0 { "ok".to_owned() } else { format!("{n} violation(s)") }
            );
        }
        for f in &self.findings {
            let at = f.silo.map_or_else(|| "-".to_owned(), |id| SiloId(id).to_string());
            let _ = writeln!(s, "  FAIL {} {at}: {}", f.rule.name(), f.detail);
        }
        s
    }

    /// One summary object, then one object per finding.
    pub fn to_json_lines(&self) -> String {
        let summary = serde_json::json!({
            "passed": self.passed(),
            "silos_checked": self.silos_checked,
            "records_checked": self.records_checked,
            "messages_checked": self.messages_checked,
        });
        let mut s = summary.to_string();
        s.push('\n');
        for f in &self.findings {
            let mut v = serde_json::to_value(f).expect("plain struct");
            v["rule_name"] = f.rule.name().into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.silos_checked = self.silos_checked.max(other.silos_checked);
        self.records_checked = self.records_checked.max(other.records_checked);
        self.messages_checked += other.messages_checked;
        self.findings.extend(other.findings);
    }
}

fn check_silos(network: &SiloNetwork, report: &mut AuditReport) {
    let mut owner: HashMap<u64, u32> = HashMap::new();
    for silo in &network.silos {
        report.silos_checked += 1;
        let t = silo.kind().data_type();
        let width = network.vocab_sizes[t] as u32;
        let mut purity_errors = 0usize;
        let mut first = None;
        for rec in silo.records() {
            report.records_checked += 1;
            let problem = if rec.data_type != t {
                Some(format!("{} silo holds a {} record", silo.kind().name(), rec.data_type))
            } else if rec.x.vocab_size() != width {
                Some(format!("vector width {} but {t} vocabulary is {width}", rec.x.vocab_size()))
            } else if rec.true_labels.is_some() != (silo.kind() == SiloKind::Clinic) {
                Some(format!(
                    "{} silo record with outcome labels present={}",
                    silo.kind().name(),
                    rec.true_labels.is_some()
                ))
            } else {
                None
            };
            if let Some(p) = problem {
                purity_errors += 1;
                first.get_or_insert(p);
            }
            if let Some(prev) = owner.insert(rec.local_id.0, silo.id().0) {
                report.findings.push(AuditFinding {
                    rule: AuditRule::IdentitySeparation,
                    silo: Some(silo.id().0),
                    detail: format!("local id shared with {}", SiloId(prev)),
                });
            }
        }
        if let Some(p) = first {
            report.findings.push(AuditFinding {
                rule: AuditRule::TypePurity,
                silo: Some(silo.id().0),
                detail: format!("{p} ({purity_errors} record(s))"),
            });
        }
    }
}

/// Checks messages as they pass, so the run never has to keep them.
pub struct AuditTrail {
    local_ids: HashSet<u64>,
    report: AuditReport,
}

impl AuditTrail {
    pub fn new(network: &SiloNetwork) -> Self {
        let mut report = AuditReport::default();
        check_silos(network, &mut report);
        let local_ids = network
            .silos
            .iter()
            .flat_map(|s| s.records().iter().map(|r| r.local_id.0))
            .collect();
        AuditTrail { local_ids, report }
    }

    pub fn observe(&mut self, msg: &ParamMessage) {
        self.report.messages_checked += 1;
        let silo = match msg.sender {
            Sender::Central => None,
            Sender::Silo(id) => Some(id.0),
        };
        let mut fail = |detail: String| {
            self.report.findings.push(AuditFinding {
                rule: AuditRule::ParamsOnly,
                silo,
                detail,
            })
        };
        if let Err(e) = msg.params() {
            fail(format!("round {} payload is not a parameter file: {e}", msg.round));
            return;
        }
        // parameter values sit in 8-byte words aligned to the payload's end
        let p = msg.payload();
        let leaked = p.rchunks_exact(8).any(|w| {
            let word = u64::from_le_bytes(w.try_into().expect("8 bytes"));
            self.local_ids.contains(&word)
        });
        if leaked {
            fail(format!("round {} payload embeds a local id", msg.round));
        }
    }

    pub fn report(&self) -> &AuditReport {
        &self.report
    }

    pub fn finish(self) -> AuditReport {
        self.report
    }
}

pub fn isolation_audit<'a>(network: &SiloNetwork, messages: impl IntoIterator<Item = &'a ParamMessage>) -> AuditReport {
    let mut trail = AuditTrail::new(network);
    for m in messages {
        trail.observe(m);
    }
    trail.finish()
}
