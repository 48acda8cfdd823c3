//! Human tables and `--porcelain` lines.
//!
//! Porcelain output is one record per line, fields separated by a tab, no
//! header, in the same column order as the human table. Tabs and newlines
//! inside a field are replaced by spaces.

use gridforge_core::wire::ClientView;
use gridforge_core::{ProcessRun, RequestStatus};

pub struct Table {
    headers: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&'static str]) -> Table {
        Table { headers: headers.to_vec(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.headers.len());
        self.rows.push(cells);
    }

    pub fn render(&self, porcelain: bool) -> String {
        let mut out = String::new();
        if porcelain {
            for r in &self.rows {
                let cells: Vec<String> = r.iter().map(|c| c.replace(['\t', '\n', '\r'], " ")).collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
            return out;
        }
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: Vec<&str>| {
            let last = cells.len() - 1;
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i == last {
                    s.push_str(c);
                } else {
                    s.push_str(&format!("{c:<w$} | "));
                }
            }
            s.trim_end().to_string() + "\n"
        };
        out.push_str(&line(self.headers.clone()));
        for r in &self.rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        out
    }
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

/// The run table of one request, rows in run id order.
pub fn runs_table(runs: &[ProcessRun]) -> Table {
    let mut t = Table::new(&["id", "rank", "client_id", "status", "obs"]);
    let mut runs: Vec<&ProcessRun> = runs.iter().collect();
    runs.sort_by_key(|r| r.run_id);
    for r in runs {
        t.row(vec![
            r.run_id.to_string(),
            r.rank.to_string(),
            opt(r.client_id),
            r.status.code().to_string(),
            r.obs.clone(),
        ]);
    }
    t
}

pub fn clients_table(clients: &[ClientView]) -> Table {
    let mut t = Table::new(&[
        "id", "name", "room", "availability", "accepting", "runs", "cpu%", "ram%", "gpu", "interactive",
    ]);
    for c in clients {
        t.row(vec![
            c.client_id.to_string(),
            c.name.clone(),
            opt(c.room.clone()),
            format!("{:?}", c.availability),
            c.accepting_new.to_string(),
            format!("{}/{}", c.active_runs, c.slots),
            format!("{:.0}", c.snapshot.cpu_pct),
            format!("{:.0}", c.snapshot.ram_pct),
            c.has_gpu.to_string(),
            c.snapshot.interactive_user_present.to_string(),
        ]);
    }
    t
}

/// One `--watch` line.
pub fn watch_line(id: impl ToString, status: RequestStatus, succeeded: u32, reps: u32, porcelain: bool) -> String {
    let id = id.to_string();
    if porcelain {
        format!("{id}\t{status}\t{succeeded}\t{reps}")
    } else {
        format!("request {id}: {status} ({succeeded}/{reps} ranks done)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridforge_core::{ClientId, RequestId, RunId, RunStatus};

    fn run(id: u64, rank: u32, client: Option<u64>, status: RunStatus, obs: &str) -> ProcessRun {
        let mut r = ProcessRun::pending(RunId(id), RequestId(1), rank, 1);
        r.client_id = client.map(ClientId);
        r.status = status;
        r.obs = obs.into();
        r
    }

    #[test]
    fn run_table_lists_codes_like_the_database_view() {
        let runs = vec![
            run(12, 3, Some(12), RunStatus::Success, "Success"),
            run(9, 3, Some(10), RunStatus::Canceled, "Canceled"),
        ];
        let text = runs_table(&runs).render(false);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id | rank | client_id | status | obs");
        assert_eq!(lines[1], "9  | 3    | 10        | 5      | Canceled");
        assert_eq!(lines[2], "12 | 3    | 12        | 3      | Success");
        assert_eq!(runs_table(&runs).render(true), "9\t3\t10\t5\tCanceled\n12\t3\t12\t3\tSuccess\n");
    }

    #[test]
    fn porcelain_fields_stay_on_one_line() {
        let mut t = Table::new(&["a", "b"]);
        t.row(vec!["x\ty".into(), "multi\nline".into()]);
        assert_eq!(t.render(true), "x y\tmulti line\n");
        let runs = vec![run(1, 0, None, RunStatus::Pending, "")];
        assert!(runs_table(&runs).render(false).lines().nth(1).unwrap().contains("| -"));
    }
}
