//! Command reports: named sections of results and a table of checks.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;
use singlag::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// One pass/fail line. A failing check always carries its residual; the
/// location is the worst phase-space point when one exists.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub residual: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub location: Option<Vec<f64>>,
}

impl Check {
    /// Passes when `residual ≤ tolerance`; NaN fails.
    pub fn at_most(name: impl Into<String>, residual: f64, tolerance: f64, location: Option<Vec<f64>>) -> Self {
        Check {
            name: name.into(),
            pass: residual <= tolerance,
            residual,
            relation: Relation::AtMost,
            tolerance,
            location,
        }
    }

    pub fn at_least(name: impl Into<String>, residual: f64, tolerance: f64, location: Option<Vec<f64>>) -> Self {
        Check {
            name: name.into(),
            pass: residual >= tolerance,
            residual,
            relation: Relation::AtLeast,
            tolerance,
            location,
        }
    }

    /// An exact integer equality, reported as `|got − want| ≤ 0`.
    pub fn count(name: impl Into<String>, got: usize, want: usize) -> Self {
        Check::at_most(name, got.abs_diff(want) as f64, 0.0, None)
    }
}

/// Running maximum that remembers where it was attained.
#[derive(Debug, Clone, Default)]
pub struct Worst {
    pub value: f64,
    pub location: Option<Vec<f64>>,
}

impl Worst {
    pub fn update(&mut self, value: f64, location: impl FnOnce() -> Vec<f64>) {
        if self.value.is_nan() {
            return;
        }
        if self.location.is_none() || value.is_nan() || value > self.value {
            self.value = value;
            self.location = Some(location());
        }
    }

    pub fn at_most(self, name: impl Into<String>, tolerance: f64) -> Check {
        Check::at_most(name, self.value, tolerance, self.location)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Section {
    pub name: String,
    #[serde(skip)]
    pub summary: Vec<(String, String)>,
    pub data: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub system: String,
    pub seed: u64,
    pub points: usize,
    pub tolerances: Tolerances,
    pub sections: Vec<Section>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Report {
    pub fn new(command: &str, system: &str, seed: u64, points: usize, tolerances: Tolerances) -> Self {
        Report {
            command: command.into(),
            system: system.into(),
            seed,
            points,
            tolerances,
            sections: Vec::new(),
            checks: Vec::new(),
            pass: true,
        }
    }

    pub fn section(&mut self, name: &str, summary: Vec<(String, String)>, data: impl Serialize) {
        let data = serde_json::to_value(data).expect("report data serializes");
        self.sections.push(Section { name: name.into(), summary, data });
    }

    pub fn check(&mut self, c: Check) {
        self.pass &= c.pass;
        self.checks.push(c);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} (seed {}, {} points)", self.command, self.system, self.seed, self.points);
        for s in &self.sections {
            if s.summary.is_empty() {
                continue;
            }
            let _ = writeln!(out, "\n[{}]", s.name);
            let width = s.summary.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
            for (k, v) in &s.summary {
                let _ = writeln!(out, "  {k:<width$}  {v}");
            }
        }
        if !self.checks.is_empty() {
            let _ = writeln!(out, "\n[checks]");
            let width = self.checks.iter().map(|c| c.name.chars().count()).max().unwrap_or(0);
            for c in &self.checks {
                let rel = match c.relation {
                    Relation::AtMost => "<=",
                    Relation::AtLeast => ">=",
                };
                let _ = write!(
                    out,
                    "  {}  {:<width$}  {:.3e} {rel} {:.1e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.residual,
                    c.tolerance
                );
                if let (false, Some(at)) = (c.pass, &c.location) {
                    let _ = write!(out, "  at {}", fmt_vec(at));
                }
                out.push('\n');
            }
            let failed = self.checks.iter().filter(|c| !c.pass).count();
            let _ = writeln!(out, "\n{} of {} checks passed", self.checks.len() - failed, self.checks.len());
        }
        out
    }
}

pub fn fmt_vec(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_fails_and_is_kept_as_worst() {
        assert!(!Check::at_most("x", f64::NAN, 1.0, None).pass);
        let mut w = Worst::default();
        w.update(1.0, || vec![1.0]);
        w.update(f64::NAN, || vec![2.0]);
        w.update(3.0, || vec![3.0]);
        assert!(w.value.is_nan());
        assert_eq!(w.location, Some(vec![2.0]));
    }

    #[test]
    fn one_failure_fails_the_report() {
        let mut r = Report::new("verify", "t", 42, 3, Tolerances::default());
        r.check(Check::count("n", 1, 1));
        assert!(r.pass);
        r.check(Check::at_least("control", 1e-3, 1e-2, Some(vec![0.5])));
        assert!(!r.pass);
        let text = r.render();
        assert!(text.contains("FAIL") && text.contains("at [0.500000]"));
        assert!(r.to_json().contains("\">=\""));
    }
}
