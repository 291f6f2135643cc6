use super::SampleMetrics;

/// One row of `metrics.csv`: group, metric name, mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub group: String,
    pub name: String,
    pub value: f64,
    pub std: f64,
}

/// Metrics aggregated over one or more seeded runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "metric,name,value,std";

    /// Mean and sample standard deviation of each quality metric across runs.
    pub fn from_runs(runs: &[SampleMetrics]) -> Self {
        let mut report = Self::default();
        if runs.is_empty() {
            return report;
        }
        let fields: [(&str, fn(&SampleMetrics) -> f64); 4] = [
            ("validity", |m| m.validity),
            ("uniqueness", |m| m.uniqueness),
            ("novelty", |m| m.novelty),
            ("samples", |m| m.samples as f64),
        ];
        for (name, get) in fields {
            let values: Vec<f64> = runs.iter().map(get).collect();
            let (mean, std) = mean_std(&values);
            let group = if name == "samples" { "count" } else { "percent" };
            report.push(group, name, mean, std);
        }
        report
    }

    pub fn push(&mut self, group: &str, name: &str, value: f64, std: f64) {
        self.rows.push(MetricRow {
            group: group.to_string(),
            name: name.to_string(),
            value,
            std,
        });
    }

    /// Adds a metric measured once per run.
    pub fn push_runs(&mut self, group: &str, name: &str, values: &[f64]) {
        if !values.is_empty() {
            let (mean, std) = mean_std(values);
            self.push(group, name, mean, std);
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.group, r.name, r.value, r.std));
        }
        out
    }
}

/// One histogram bin of a property over a reference and a generated set.
#[derive(Debug, Clone, PartialEq)]
pub struct HistRow {
    pub property: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count_ref: usize,
    pub count_gen: usize,
}

impl HistRow {
    pub const CSV_HEADER: &'static str = "property,bin_lo,bin_hi,count_ref,count_gen";
}

/// Fixed-width bins over `[min, max]` of both sets together. A degenerate
/// range becomes a unit-width interval around the single value.
pub fn distribution_report(property: &str, reference: &[f64], generated: &[f64], bins: usize) -> Vec<HistRow> {
    let all = reference.iter().chain(generated);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if bins == 0 || !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let bin_of = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut rows: Vec<HistRow> = (0..bins)
        .map(|b| HistRow {
            property: property.to_string(),
            bin_lo: lo + b as f64 * width,
            bin_hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count_ref: 0,
            count_gen: 0,
        })
        .collect();
    for &v in reference {
        rows[bin_of(v)].count_ref += 1;
    }
    for &v in generated {
        rows[bin_of(v)].count_gen += 1;
    }
    rows
}

impl HistRow {
    /// Normalized densities `(reference, generated)` of this bin given the
    /// set sizes.
    pub fn densities(&self, n_ref: usize, n_gen: usize) -> (f64, f64) {
        let w = self.bin_hi - self.bin_lo;
        let d = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / (n as f64 * w) };
        (d(self.count_ref, n_ref), d(self.count_gen, n_gen))
    }
}

pub fn hist_csv(rows: &[HistRow]) -> String {
    let mut out = String::from(HistRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.property, r.bin_lo, r.bin_hi, r.count_ref, r.count_gen
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_have_identical_columns() {
        let v = [1.0, 2.0, 2.5, 7.0, 3.0];
        let rows = distribution_report("mw", &v, &v, 4);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.count_ref == r.count_gen));
        assert_eq!(rows.iter().map(|r| r.count_ref).sum::<usize>(), 5);
        assert_eq!(rows[0].bin_lo, 1.0);
        assert_eq!(rows[3].bin_hi, 7.0);
        let (a, b) = rows[0].densities(5, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_generated_set_gives_zero_column() {
        let rows = distribution_report("mw", &[1.0, 4.0], &[], 3);
        assert!(rows.iter().all(|r| r.count_gen == 0));
        assert_eq!(rows[0].densities(2, 0).1, 0.0);
    }

    #[test]
    fn single_molecule_fills_one_bin() {
        let rows = distribution_report("mw", &[], &[46.07], 5);
        assert_eq!(rows.iter().filter(|r| r.count_gen > 0).count(), 1);
        assert!(distribution_report("mw", &[], &[], 5).is_empty());
    }

    #[test]
    fn csv_layouts() {
        let runs = [
            SampleMetrics { samples: 10, valid: 8, validity: 80.0, uniqueness: 100.0, novelty: 50.0, no_valid: false },
            SampleMetrics { samples: 10, valid: 6, validity: 60.0, uniqueness: 100.0, novelty: 50.0, no_valid: false },
        ];
        let r = MetricsReport::from_runs(&runs);
        assert_eq!(r.get("validity"), Some(70.0));
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,name,value,std\n"));
        assert!(csv.contains(&format!("percent,validity,70,{}", 200f64.sqrt())));
        let h = hist_csv(&distribution_report("rings", &[0.0], &[1.0], 1));
        assert_eq!(h, "property,bin_lo,bin_hi,count_ref,count_gen\nrings,0,1,1,1\n");
    }
}
