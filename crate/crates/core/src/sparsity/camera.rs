//! Toy multi-view camera: each view covers an equal azimuth sector around
//! the ego and maps (azimuth, range) to a normalized image coordinate
//! `(u, v) ∈ [0, 1]²`, column along azimuth and row along range.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::stream::TokenMeta;
use crate::geometry::{normalize_angle, Point2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCamera {
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub near_range: f64,
    pub max_range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub view: usize,
    pub u: f64,
    pub v: f64,
}

impl ToyCamera {
    fn sector(&self) -> f64 {
        2.0 * PI / self.views as f64
    }

    fn view_center(&self, view: usize) -> f64 {
        normalize_angle(view as f64 * self.sector())
    }

    pub fn tokens_per_view(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_tokens(&self) -> usize {
        self.views * self.tokens_per_view()
    }

    /// Ego-frame point to view and normalized image coordinates. Range is
    /// clamped into the image.
    pub fn project(&self, p: Point2) -> Projection {
        let theta = p.y.atan2(p.x);
        let half = self.sector() / 2.0;
        let shifted = (theta + half).rem_euclid(2.0 * PI);
        let view = ((shifted / self.sector()).floor() as usize).min(self.views - 1);
        let rel = normalize_angle(theta - self.view_center(view));
        let u = ((rel + half) / self.sector()).clamp(0.0, 1.0);
        let v = ((p.norm() - self.near_range) / (self.max_range - self.near_range)).clamp(0.0, 1.0);
        Projection { view, u, v }
    }

    pub fn in_range(&self, p: Point2) -> bool {
        let r = p.norm();
        r >= self.near_range - 1e-9 && r <= self.max_range + 1e-9
    }

    /// Grid cell of an in-range point.
    pub fn cell_of(&self, p: Point2) -> Option<TokenMeta> {
        if !self.in_range(p) {
            return None;
        }
        let pr = self.project(p);
        Some(TokenMeta {
            view: pr.view,
            row: (pr.v * (self.grid_h - 1) as f64).round() as usize,
            col: (pr.u * (self.grid_w - 1) as f64).round() as usize,
        })
    }

    /// Ego-frame BEV position of a cell center.
    pub fn cell_center(&self, cell: TokenMeta) -> Point2 {
        let u = cell.col as f64 / (self.grid_w - 1) as f64;
        let v = cell.row as f64 / (self.grid_h - 1) as f64;
        let theta = self.view_center(cell.view) + u * self.sector() - self.sector() / 2.0;
        let r = self.near_range + v * (self.max_range - self.near_range);
        Point2::new(r * theta.cos(), r * theta.sin())
    }

    /// Row in the full, original-order token stream.
    pub fn token_index(&self, cell: TokenMeta) -> usize {
        cell.view * self.tokens_per_view() + cell.row * self.grid_w + cell.col
    }

    pub fn cell_at(&self, index: usize) -> TokenMeta {
        let per = self.tokens_per_view();
        TokenMeta { view: index / per, row: (index % per) / self.grid_w, col: index % self.grid_w }
    }
}
