//! Host and agent resource metrics read from `/proc`.

use std::time::Instant;

use crate::federation::AgentMetrics;

/// Resident set size of a process in MiB, from `/proc/<pid>/status`.
pub fn rss_mb(pid: u32) -> Option<f64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    status_field_kib(&status, "VmRSS:").map(|kib| kib as f64 / 1024.0)
}

fn status_field_kib(text: &str, key: &str) -> Option<u64> {
    text.lines()
        .find(|l| l.starts_with(key))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// Memory in use on the host (total minus available), in MiB.
pub fn host_used_mb() -> Option<f64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let total = status_field_kib(&info, "MemTotal:")?;
    let avail = status_field_kib(&info, "MemAvailable:")?;
    Some(total.saturating_sub(avail) as f64 / 1024.0)
}

/// utime + stime of this process, in clock ticks.
fn own_cpu_ticks() -> Option<u64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // Fields after the parenthesised command name; utime and stime are the
    // 14th and 15th fields overall.
    let rest = stat.rsplit_once(')')?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(utime + stime)
}

/// Samples agent metrics; CPU percent is averaged since the previous sample.
#[derive(Debug)]
pub struct MetricsSampler {
    last: Option<(Instant, u64)>,
    ticks_per_s: f64,
}

impl Default for MetricsSampler {
    fn default() -> Self {
        // SAFETY: sysconf reads a configuration value and has no
        // preconditions.
        let hz = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        MetricsSampler {
            last: None,
            ticks_per_s: if hz > 0 { hz as f64 } else { 100.0 },
        }
    }
}

impl MetricsSampler {
    pub fn sample(&mut self) -> AgentMetrics {
        let now = Instant::now();
        let ticks = own_cpu_ticks();
        let cpu_percent = match (self.last, ticks) {
            (Some((then, before)), Some(after)) => {
                let wall = now.duration_since(then).as_secs_f64();
                (wall > 0.0).then(|| (after.saturating_sub(before) as f64 / self.ticks_per_s) / wall * 100.0)
            }
            _ => None,
        };
        if let Some(t) = ticks {
            self.last = Some((now, t));
        }
        AgentMetrics {
            agent_memory_mb: rss_mb(std::process::id()),
            host_memory_mb: host_used_mb(),
            cpu_percent,
        }
    }
}
