use std::io::Write;

use super::{BehaviorMetrics, EvalReport};
use crate::data::io::Provenance;

fn rows(report: &EvalReport) -> Vec<(String, String)> {
    let mut out = vec![
        ("mu".to_owned(), report.inference.mu.to_string()),
        ("epsilon".to_owned(), report.inference.epsilon.to_string()),
        ("inference_seed".to_owned(), report.inference.seed.to_string()),
        ("runs".to_owned(), report.runs.to_string()),
    ];
    let mut block = |name: &str, m: &BehaviorMetrics| {
        out.push((format!("{name}.steps"), m.steps.to_string()));
        for (i, k) in report.ks.iter().enumerate() {
            out.push((format!("{name}.hr@{k}"), m.hr[i].to_string()));
            out.push((format!("{name}.ndcg@{k}"), m.ndcg[i].to_string()));
        }
    };
    block("purchase", &report.purchase);
    block("click", &report.click);
    out.push((
        "cumulative_reward_at_1".to_owned(),
        report.cumulative_reward_at_1.to_string(),
    ));
    out
}

/// `key = value` lines, purchase block before click block.
pub fn write_report_text(out: &mut impl Write, report: &EvalReport, prov: Option<&Provenance>) -> std::io::Result<()> {
    if let Some(p) = prov {
        writeln!(out, "{}", p.comment())?;
    }
    for (k, v) in rows(report) {
        writeln!(out, "{k} = {v}")?;
    }
    Ok(())
}

/// Same content as [`write_report_text`] as a two-column CSV.
pub fn write_report_csv(out: &mut impl Write, report: &EvalReport, prov: Option<&Provenance>) -> std::io::Result<()> {
    if let Some(p) = prov {
        writeln!(out, "{}", p.comment())?;
    }
    writeln!(out, "key,value")?;
    for (k, v) in rows(report) {
        writeln!(out, "{k},{v}")?;
    }
    Ok(())
}

impl EvalReport {
    /// Fixed-width table with one row per behavior and `HR@k NG@k` columns.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10}{:>8}", "", "steps");
        for k in &self.ks {
            s += &format!("{:>10}{:>10}", format!("HR@{k}"), format!("NG@{k}"));
        }
        s.push('\n');
        for (name, m) in [("purchase", &self.purchase), ("click", &self.click)] {
            s += &format!("{name:<10}{:>8}", m.steps);
            for i in 0..self.ks.len() {
                s += &format!("{:>10.4}{:>10.4}", m.hr[i], m.ndcg[i]);
            }
            s.push('\n');
        }
        s += &format!("cumulative reward@1: {}\n", self.cumulative_reward_at_1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::InferenceRewardConfig;

    fn report() -> EvalReport {
        EvalReport {
            ks: vec![5],
            purchase: BehaviorMetrics {
                steps: 2,
                hr: vec![0.5],
                ndcg: vec![0.25],
            },
            click: BehaviorMetrics {
                steps: 4,
                hr: vec![0.75],
                ndcg: vec![0.5],
            },
            cumulative_reward_at_1: 1.2,
            inference: InferenceRewardConfig::default(),
            runs: 1,
        }
    }

    #[test]
    fn text_layout() {
        let mut buf = Vec::new();
        let prov = Provenance {
            config_hash: "h".into(),
            seed: 1,
        };
        write_report_text(&mut buf, &report(), Some(&prov)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let expected = "# prl config_hash=h seed=1\nmu = 2\nepsilon = 0\ninference_seed = 0\nruns = 1\n\
            purchase.steps = 2\npurchase.hr@5 = 0.5\npurchase.ndcg@5 = 0.25\n\
            click.steps = 4\nclick.hr@5 = 0.75\nclick.ndcg@5 = 0.5\ncumulative_reward_at_1 = 1.2\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn csv_has_header() {
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &report(), None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("key,value\nmu,2\n"));
        assert!(report().table().contains("HR@5"));
    }
}
