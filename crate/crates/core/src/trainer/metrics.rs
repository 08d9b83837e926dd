use std::io::Write;

/// One row of the per-update metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMetrics {
    pub update_idx: usize,
    pub env_steps: usize,
    /// Mean return of episodes finished during this rollout; NaN if none did.
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_selection_kl: f64,
    pub selector_entropy: f64,
    pub policy_usage: Vec<f64>,
    pub channel_cost_per_step: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_entropy: f64,
    pub loss_kl: f64,
    pub wall_time_s: f64,
}

pub fn metrics_header(pool_size: usize) -> String {
    let mut cols = vec![
        "update_idx".to_string(),
        "env_steps".into(),
        "mean_return".into(),
        "std_return".into(),
        "mean_selection_kl".into(),
        "selector_entropy".into(),
    ];
    cols.extend((0..pool_size).map(|u| format!("policy_usage_{u}")));
    cols.extend(
        ["channel_cost_per_step", "loss_policy", "loss_value", "loss_entropy", "loss_kl", "wall_time_s"]
            .map(String::from),
    );
    cols.join(",")
}

impl UpdateMetrics {
    pub fn csv_row(&self) -> String {
        let mut fields = vec![
            self.update_idx.to_string(),
            self.env_steps.to_string(),
            self.mean_return.to_string(),
            self.std_return.to_string(),
            self.mean_selection_kl.to_string(),
            self.selector_entropy.to_string(),
        ];
        fields.extend(self.policy_usage.iter().map(f64::to_string));
        fields.extend(
            [
                self.channel_cost_per_step,
                self.loss_policy,
                self.loss_value,
                self.loss_entropy,
                self.loss_kl,
                self.wall_time_s,
            ]
            .iter()
            .map(f64::to_string),
        );
        fields.join(",")
    }
}

/// Streams metrics rows as CSV with LF line endings.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, pool_size: usize) -> std::io::Result<Self> {
        writeln!(out, "{}", metrics_header(pool_size))?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, m: &UpdateMetrics) -> std::io::Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// A parsed metrics CSV: header plus numeric rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().ok_or("empty metrics file")?.split(',').map(String::from).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1)))
                .collect::<Result<_, _>>()?;
            if row.len() != header.len() {
                return Err(format!("row {} has {} fields, header has {}", i + 1, row.len(), header.len()));
            }
            rows.push(row);
        }
        Ok(MetricsTable { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Mean of the finite values among the last `fraction` of `xs` (at least one
/// element).
pub fn tail_mean(xs: &[f64], fraction: f64) -> f64 {
    window_mean(xs, fraction, true)
}

/// Mean of the finite values among the first `fraction` of `xs`.
pub fn head_mean(xs: &[f64], fraction: f64) -> f64 {
    window_mean(xs, fraction, false)
}

fn window_mean(xs: &[f64], fraction: f64, tail: bool) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let k = ((xs.len() as f64 * fraction).ceil() as usize).clamp(1, xs.len());
    let window = if tail { &xs[xs.len() - k..] } else { &xs[..k] };
    let finite: Vec<f64> = window.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_order() {
        assert_eq!(
            metrics_header(2),
            "update_idx,env_steps,mean_return,std_return,mean_selection_kl,selector_entropy,\
             policy_usage_0,policy_usage_1,channel_cost_per_step,loss_policy,loss_value,loss_entropy,loss_kl,wall_time_s"
        );
    }

    #[test]
    fn windows() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(tail_mean(&xs, 0.1), 19.5);
        assert_eq!(head_mean(&xs, 0.1), 1.5);
        assert_eq!(tail_mean(&[3.0], 0.1), 3.0);
        assert!(tail_mean(&[], 0.1).is_nan());
    }

    #[test]
    fn round_trip_row() {
        let m = UpdateMetrics {
            update_idx: 3,
            env_steps: 512,
            mean_return: -120.5,
            std_return: 4.25,
            mean_selection_kl: 0.01,
            selector_entropy: 1.0,
            policy_usage: vec![0.5, 0.25, 0.25],
            channel_cost_per_step: 4.0,
            loss_policy: -0.1,
            loss_value: 2.0,
            loss_entropy: 1.6,
            loss_kl: 0.0001,
            wall_time_s: 0.0,
        };
        let mut w = MetricsWriter::new(Vec::new(), 3).unwrap();
        w.write(&m).unwrap();
        let table = MetricsTable::parse(&String::from_utf8(w.into_inner()).unwrap()).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.column("mean_return").unwrap(), vec![-120.5]);
        assert_eq!(table.column("policy_usage_2").unwrap(), vec![0.25]);
    }
}
