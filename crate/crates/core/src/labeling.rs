//! Expert labeling: per-plot-type permissions, chronological grids of
//! unlabeled images, and single or range ("shift-click") label application.
//!
//! Range fill is defined on capture timestamps rather than grid positions, so
//! it behaves the same across page boundaries. It relabels already-labeled
//! images inside the interval.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ImageQuery, ImageRef, LabelRecord, Permission};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridItem {
    pub image: ImageRef,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPage {
    pub plot_type: String,
    pub page_index: usize,
    pub page_size: usize,
    pub items: Vec<GridItem>,
}

pub fn thumbnail_url(image_id: i64) -> String {
    format!("/images/{image_id}/thumb")
}

/// Longest edge of a grid thumbnail, in pixels.
pub const THUMBNAIL_EDGE: u32 = 160;

/// Downscaled PNG preserving aspect ratio; smaller images pass through.
pub fn thumbnail(png_bytes: &[u8]) -> Result<Vec<u8>> {
    let img = image::load_from_memory_with_format(png_bytes, image::ImageFormat::Png)
        .map_err(|e| Error::CorruptImage(e.to_string()))?;
    let small = img.thumbnail(THUMBNAIL_EDGE, THUMBNAIL_EDGE);
    let mut out = std::io::Cursor::new(Vec::new());
    small
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::CorruptImage(e.to_string()))?;
    Ok(out.into_inner())
}

/// The `page_index`-th page of unlabeled images of `plot_type`, oldest first.
pub fn get_unlabeled_grid(
    catalog: &Catalog,
    plot_type: &str,
    page_index: usize,
    page_size: usize,
) -> Result<GridPage> {
    if page_size == 0 {
        return Err(Error::InvalidConfig("page_size must be at least 1".into()));
    }
    if !catalog.is_known_plot_type(plot_type)? {
        return Err(Error::UnknownPlotType(plot_type.to_string()));
    }
    let rows = catalog.query_images(&ImageQuery {
        plot_type: Some(plot_type.to_string()),
        labeled: Some(false),
        offset: page_index.saturating_mul(page_size),
        limit: Some(page_size),
        ..ImageQuery::default()
    })?;
    Ok(GridPage {
        plot_type: plot_type.to_string(),
        page_index,
        page_size,
        items: rows
            .into_iter()
            .map(|(image, _)| GridItem {
                thumbnail_url: thumbnail_url(image.image_id),
                image,
            })
            .collect(),
    })
}

fn require_permission(catalog: &Catalog, user: &str, plot_type: &str) -> Result<()> {
    if catalog.has_permission(user, plot_type)? {
        Ok(())
    } else {
        Err(Error::PermissionDenied {
            user: user.to_string(),
            plot_type: plot_type.to_string(),
        })
    }
}

pub fn apply_label(catalog: &Catalog, user: &str, image_id: i64, class_name: &str) -> Result<LabelRecord> {
    let image = catalog.image(image_id)?;
    require_permission(catalog, user, &image.plot_type)?;
    catalog.record_label(image_id, class_name, user)
}

/// Labels every image of the endpoints' plot type captured in the closed
/// interval between the two endpoints. Argument order does not matter.
/// Returns the number of labels written.
pub fn apply_range_label(
    catalog: &Catalog,
    user: &str,
    anchor_image_id: i64,
    target_image_id: i64,
    class_name: &str,
) -> Result<usize> {
    let anchor = catalog.image(anchor_image_id)?;
    let target = catalog.image(target_image_id)?;
    if anchor.plot_type != target.plot_type {
        return Err(Error::PlotTypeMismatch(anchor.plot_type, target.plot_type));
    }
    require_permission(catalog, user, &anchor.plot_type)?;
    let from = anchor.captured_at.min(target.captured_at);
    let to = anchor.captured_at.max(target.captured_at);
    let ids: Vec<i64> = catalog
        .query_images(&ImageQuery {
            plot_type: Some(anchor.plot_type.clone()),
            time_range: Some((from, to)),
            ..ImageQuery::default()
        })?
        .into_iter()
        .map(|(image, _)| image.image_id)
        .collect();
    catalog.record_labels(&anchor.plot_type, &ids, class_name, user)
}

/// Bulk-imports `(path, class)` labels, e.g. a synthetic corpus's truth file.
/// Paths must resolve to catalog images. Bypasses permissions, so callers
/// gate it to administrators.
pub fn import_labels(catalog: &Catalog, labels: &[(PathBuf, String)], labeler: &str) -> Result<usize> {
    let by_path: HashMap<PathBuf, i64> = catalog
        .query_images(&ImageQuery::default())?
        .into_iter()
        .map(|(img, _)| Ok((catalog.resolve_path(img.image_id)?, img.image_id)))
        .collect::<Result<_>>()?;
    for (path, class) in labels {
        let Some(&id) = by_path.get(path) else {
            return Err(Error::InvalidConfig(format!("{} is not a catalog image", path.display())));
        };
        catalog.record_label(id, class, labeler)?;
    }
    Ok(labels.len())
}

/// Idempotent grant by an administrator.
pub fn grant_permission(catalog: &Catalog, admin_user: &str, user: &str, plot_type: &str) -> Result<Permission> {
    match catalog.user(admin_user)? {
        Some(u) if u.is_admin => catalog.insert_permission(user, plot_type),
        _ => Err(Error::NotAdmin(admin_user.to_string())),
    }
}
