//! CSV rendering. Rows are emitted in sorted key order and floats use the
//! shortest round-trip representation, so equal inputs give equal bytes.

use std::fmt::Write;

use crate::dilution::{averages, DilutionReport};
use crate::graph::Graph;
use crate::trainer::EpochRecord;

/// `node_id,hop,delta,receptive_field`; hop 0 is the identity row (`δ = 1`).
pub fn inter_csv(r: &DilutionReport) -> String {
    let mut s = String::from("node_id,hop,delta,receptive_field\n");
    let n = r.inter.first().map_or(0, Vec::len);
    for v in 0..n {
        writeln!(s, "{v},0,1,1").unwrap();
        for (l, hop) in r.inter.iter().enumerate() {
            writeln!(s, "{v},{},{},{}", l + 1, hop[v], r.receptive[l][v]).unwrap();
        }
    }
    s
}

/// `node_id,attr_id,delta,delta_bar_pct`.
pub fn intra_csv(r: &DilutionReport) -> String {
    let mut s = String::from("node_id,attr_id,delta,delta_bar_pct\n");
    for (e, c) in r.intra.iter().zip(&r.intra_change) {
        writeln!(s, "{},{},{},{}", e.node, e.attr, e.delta, c).unwrap();
    }
    s
}

/// `node_id,hop,preserved,returned`.
pub fn decomposition_csv(r: &DilutionReport) -> String {
    let mut s = String::from("node_id,hop,preserved,returned\n");
    let n = r.decomposition.first().map_or(0, Vec::len);
    for v in 0..n {
        for (l, hop) in r.decomposition.iter().enumerate() {
            writeln!(s, "{v},{},{},{}", l + 1, hop[v].preserved, hop[v].returned).unwrap();
        }
    }
    s
}

/// Per-hop averages: `hop,mean_receptive_field,mean_delta,mean_delta_non_isolated`.
pub fn receptive_csv(r: &DilutionReport, g: &Graph) -> String {
    let mut s = String::from("hop,mean_receptive_field,mean_delta,mean_delta_non_isolated\n");
    for (l, (delta, rf)) in r.inter.iter().zip(&r.receptive).enumerate() {
        let mean_rf = rf.iter().sum::<usize>() as f64 / rf.len().max(1) as f64;
        let (all, non_iso) = averages(delta, g);
        writeln!(s, "{},{},{},{}", l + 1, mean_rf, all, non_iso).unwrap();
    }
    s
}

/// `hop,bin_lo,bin_hi,count`.
pub fn histograms_csv(r: &DilutionReport) -> String {
    let mut s = String::from("hop,bin_lo,bin_hi,count\n");
    for (l, h) in r.histograms.iter().enumerate() {
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(s, "{},{},{},{}", l + 1, h.edges[i], h.edges[i + 1], c).unwrap();
        }
    }
    s
}

/// `epoch,loss,val_metric`.
pub fn run_metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,val_metric\n");
    for e in history {
        writeln!(s, "{},{},{}", e.epoch, e.loss, e.val_metric).unwrap();
    }
    s
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AttributeIncidence;

    #[test]
    fn k2_inter_rows() {
        let g = Graph::from_edges(&[(0, 1)]).unwrap();
        let a = AttributeIncidence::new(1, vec![vec![0], vec![0]]).unwrap();
        let r = DilutionReport::compute(&g, &a, 1, 4).unwrap();
        assert_eq!(
            inter_csv(&r),
            "node_id,hop,delta,receptive_field\n0,0,1,1\n0,1,0.5,2\n1,0,1,1\n1,1,0.5,2\n"
        );
        assert!(intra_csv(&r).ends_with("1,0,1,0\n"));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
