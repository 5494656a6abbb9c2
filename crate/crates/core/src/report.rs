//! Plain-text rendering of matrices, rankings and detection grids.

use nalgebra::DMatrix;

use crate::mixed_dmd::{RankEntry, SubsetModel};
use crate::nodyn::DetectionGrid;

/// Matrix entries with smaller magnitude print as "−".
pub const DISPLAY_FLOOR: f64 = 5e-3;
pub const SUPPRESSED: &str = "−";

pub fn format_entry(v: f64, floor: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.abs() < floor {
        SUPPRESSED.into()
    } else {
        format!("{v:.3}")
    }
}

/// Left-aligned first column, right-aligned others, two spaces apart.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let ncols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (j, cell) in row.iter().enumerate().take(ncols) {
            widths[j] = widths[j].max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (j, cell) in cells.iter().enumerate().take(ncols) {
            let pad = widths[j] - cell.chars().count();
            if j == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * ncols.saturating_sub(1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn render_matrix(m: &DMatrix<f64>, row_names: &[String], col_names: &[String], floor: f64) -> String {
    let mut header = vec![String::new()];
    header.extend(col_names.iter().cloned());
    let rows: Vec<Vec<String>> = (0..m.nrows())
        .map(|i| {
            let mut row = vec![row_names[i].clone()];
            row.extend((0..m.ncols()).map(|j| format_entry(m[(i, j)], floor)));
            row
        })
        .collect();
    render_table(&header, &rows)
}

pub fn render_ranking(entries: &[RankEntry]) -> String {
    let header: Vec<String> = ["Combination", "Status", "RSS", "L1_Aref", "L1_Am", "TotalScore", "CPU"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                e.combination(),
                e.status.label(),
                format!("{:.3}", e.rss),
                format!("{:.3}", e.l1_reference),
                format!("{:.3}", e.l1_terms),
                format!("{:.3}", e.score),
                format!("{:.2}s", e.seconds),
            ]
        })
        .collect();
    render_table(&header, &rows)
}

/// Reference and corrective matrices of one fitted subset, plus the
/// per-pattern spectral radii.
pub fn render_subset_model(model: &SubsetModel, floor: f64) -> String {
    let cols: Vec<String> = model
        .state_cols
        .iter()
        .chain(&model.imposed_cols)
        .cloned()
        .collect();
    let mut out = format!("Reference matrix\n{}", render_matrix(&model.reference, &model.state_cols, &cols, floor));
    for t in &model.terms {
        out.push_str(&format!(
            "\nCorrection {} (L1 {:.4})\n{}",
            t.modules.join("*"),
            t.l1,
            render_matrix(&t.matrix, &model.state_cols, &cols, floor)
        ));
    }
    let rows: Vec<Vec<String>> = model
        .radii
        .iter()
        .map(|r| vec![r.label(), format!("{:.4}", r.radius)])
        .collect();
    out.push_str(&format!("\nSpectral radii\n{}", render_table(&["Pattern".into(), "Radius".into()], &rows)));
    out
}

/// Retained coefficients by response and module; other cells print "−".
pub fn render_grid(grid: &DetectionGrid) -> String {
    let mut header = vec![String::new()];
    header.extend(grid.modules.iter().cloned());
    let rows: Vec<Vec<String>> = grid
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![r.clone()];
            row.extend((0..grid.modules.len()).map(|j| {
                if grid.retained_cells[i][j] {
                    format!("{:.3}", grid.coef[i][j])
                } else {
                    SUPPRESSED.into()
                }
            }));
            row
        })
        .collect();
    format!("{}Retained: {}\n", render_table(&header, &rows), grid.retained.join(", "))
}
