//! Vertex geometric embedding: the sum of image-contextual, positional, and
//! topological per-vertex features.

use crate::geom::{spectral_embedding, LineGraph, Point, RasterImage};
use crate::model::EmbedParams;
use crate::tensor::{self, Tensor};
use thiserror::Error;

/// K×C per-vertex feature matrix.
pub type VertexFeatures = Tensor;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("vertex {index} at ({x}, {y}) rounds outside the {width}x{height} feature map")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("image {iw}x{ih} does not match graph {gw}x{gh}")]
    DimensionMismatch { iw: u32, ih: u32, gw: u32, gh: u32 },
    #[error("positional normalization needs width and height >= 2, got {width}x{height}")]
    DegenerateCanvas { width: u32, height: u32 },
}

/// Which embedding components participate; used by ablation experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedToggles {
    pub contextual: bool,
    pub positional: bool,
    pub topological: bool,
}

impl Default for EmbedToggles {
    fn default() -> Self {
        EmbedToggles {
            contextual: true,
            positional: true,
            topological: true,
        }
    }
}

/// Deep contextual features of the raster image, spatially aligned with it.
///
/// Three 3x3 convolutions with zero padding and ReLU between layers; the
/// returned tensor is `[C, H, W]` (channel-major planes).
pub fn contextual_features(image: &RasterImage, params: &EmbedParams) -> Tensor {
    let input = Tensor::from_vec(
        &[1, image.height as usize, image.width as usize],
        image.data.clone(),
    );
    let h1 = tensor::map_unary(
        &tensor::conv2d(&input, &params.conv1.w, &params.conv1.b),
        |v| v.max(0.0),
    );
    let h2 = tensor::map_unary(
        &tensor::conv2d(&h1, &params.conv2.w, &params.conv2.b),
        |v| v.max(0.0),
    );
    tensor::conv2d(&h2, &params.conv3.w, &params.conv3.b)
}

/// Round a vertex to its lookup pixel (round-half-up on both axes) and check
/// bounds against a `width`x`height` grid.
pub fn lookup_pixels(
    vertices: &[Point],
    width: usize,
    height: usize,
) -> Result<Vec<(usize, usize)>, EmbedError> {
    vertices
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let (px, py) = v.round_pixel();
            if px < 0 || py < 0 || px >= width as i64 || py >= height as i64 {
                Err(EmbedError::OutOfBounds {
                    index,
                    x: v.x,
                    y: v.y,
                    width,
                    height,
                })
            } else {
                Ok((px as usize, py as usize))
            }
        })
        .collect()
}

/// Per-vertex rows of a `[C, H, W]` feature map at the rounded vertex pixels.
pub fn index_at_vertices(featmap: &Tensor, vertices: &[Point]) -> Result<Tensor, EmbedError> {
    let (c, h, w) = (featmap.shape[0], featmap.shape[1], featmap.shape[2]);
    let pixels = lookup_pixels(vertices, w, h)?;
    let mut out = Tensor::zeros(&[vertices.len(), c]);
    for (k, &(x, y)) in pixels.iter().enumerate() {
        for ch in 0..c {
            out.data[k * c + ch] = featmap.data[ch * h * w + y * w + x];
        }
    }
    Ok(out)
}

/// Coordinates normalized to (-1, 1) on both axes.
pub fn normalized_coords(vertices: &[Point], width: u32, height: u32) -> Result<Tensor, EmbedError> {
    if width < 2 || height < 2 {
        return Err(EmbedError::DegenerateCanvas { width, height });
    }
    let (w, h) = (width as f64, height as f64);
    let mut out = Tensor::zeros(&[vertices.len(), 2]);
    for (i, v) in vertices.iter().enumerate() {
        out.data[i * 2] = 2.0 * v.x / (w - 1.0) - 1.0;
        out.data[i * 2 + 1] = 2.0 * v.y / (h - 1.0) - 1.0;
    }
    Ok(out)
}

fn mlp2(x: &Tensor, mlp: &crate::model::Mlp2) -> Tensor {
    let h = tensor::map_unary(&tensor::affine(x, &mlp.l1.w, &mlp.l1.b), |v| v.max(0.0));
    tensor::affine(&h, &mlp.l2.w, &mlp.l2.b)
}

/// Positional embedding of normalized vertex coordinates.
pub fn positional_embedding(
    vertices: &[Point],
    width: u32,
    height: u32,
    params: &EmbedParams,
) -> Result<Tensor, EmbedError> {
    let coords = normalized_coords(vertices, width, height)?;
    Ok(mlp2(&coords, &params.pos_mlp))
}

/// Topological embedding: the spectral coordinates of the graph Laplacian
/// fed through the topology MLP.
pub fn topological_embedding(graph: &LineGraph, params: &EmbedParams) -> Tensor {
    let s_dim = params.topo_mlp.l1.w.shape[1];
    let spectral = spectral_embedding(graph, s_dim);
    mlp2(&spectral, &params.topo_mlp)
}

/// Full vertex embedding: elementwise sum of the three components.
pub fn embed_vertices(
    graph: &LineGraph,
    image: &RasterImage,
    params: &EmbedParams,
) -> Result<VertexFeatures, EmbedError> {
    embed_vertices_ablated(graph, image, params, EmbedToggles::default())
}

/// [`embed_vertices`] with individual components zeroed out for ablations.
pub fn embed_vertices_ablated(
    graph: &LineGraph,
    image: &RasterImage,
    params: &EmbedParams,
    toggles: EmbedToggles,
) -> Result<VertexFeatures, EmbedError> {
    if image.width != graph.width || image.height != graph.height {
        return Err(EmbedError::DimensionMismatch {
            iw: image.width,
            ih: image.height,
            gw: graph.width,
            gh: graph.height,
        });
    }
    let c = params.conv3.w.shape[0];
    let k = graph.vertex_count();
    let mut sum = Tensor::zeros(&[k, c]);
    if toggles.contextual {
        let featmap = contextual_features(image, params);
        let ctx = index_at_vertices(&featmap, &graph.vertices)?;
        sum = ctx;
    }
    if toggles.positional {
        let pos = positional_embedding(&graph.vertices, graph.width, graph.height, params)?;
        sum = tensor::zip_binary(&sum, &pos, |a, b| a + b);
    }
    if toggles.topological {
        let topo = topological_embedding(graph, params);
        sum = tensor::zip_binary(&sum, &topo, |a, b| a + b);
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use rand::prelude::*;

    fn small_params(seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                feature_dim: 8,
                attention_layers: 1,
                spectral_dim: 4,
                ..ModelConfig::default()
            },
            seed,
        )
    }

    fn zeroed(mut t: Tensor) -> Tensor {
        for v in t.data.iter_mut() {
            *v = 0.0;
        }
        t
    }

    fn test_graph() -> LineGraph {
        let mut g = LineGraph::new(12, 10);
        g.vertices.push(Point::new(2.0, 3.0));
        g.vertices.push(Point::new(7.5, 4.49));
        g.vertices.push(Point::new(11.0, 9.0));
        g.add_edge(0, 1).unwrap();
        g.add_edge(1, 2).unwrap();
        g
    }

    fn test_image() -> RasterImage {
        let mut img = RasterImage::blank(12, 10);
        for x in 2..9 {
            img.set(x, 3, 0.0);
        }
        img
    }

    #[test]
    fn zero_weights_give_zero_feature_map() {
        let mut p = small_params(1).embed;
        p.conv1 = crate::model::ConvParams {
            w: zeroed(p.conv1.w),
            b: zeroed(p.conv1.b),
        };
        p.conv2 = crate::model::ConvParams {
            w: zeroed(p.conv2.w),
            b: zeroed(p.conv2.b),
        };
        p.conv3 = crate::model::ConvParams {
            w: zeroed(p.conv3.w),
            b: zeroed(p.conv3.b),
        };
        let map = contextual_features(&test_image(), &p);
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_first_layer_reproduces_intensities() {
        // Center tap of channel 0 = 1 in every layer, all else zero, so
        // channel 0 carries the raw intensity through the (non-negative)
        // ReLUs and the final linear layer.
        let mut p = small_params(1).embed;
        for conv in [&mut p.conv1, &mut p.conv2, &mut p.conv3] {
            conv.w = zeroed(conv.w.clone());
            conv.b = zeroed(conv.b.clone());
            let (ci, k) = (conv.w.shape[1], conv.w.shape[2]);
            // out channel 0 reads in channel 0's center tap
            conv.w.data[0 * ci * k * k + 0 * k * k + 1 * k + 1] = 1.0;
        }
        let img = test_image();
        let map = contextual_features(&img, &p);
        let (h, w) = (img.height as usize, img.width as usize);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(map.data[y * w + x], img.at(x as u32, y as u32));
            }
        }
    }

    #[test]
    fn index_rounds_half_up() {
        let featmap = Tensor::from_fn(&[1, 10, 12], |i| i as f64);
        let rows = index_at_vertices(
            &featmap,
            &[Point::new(2.0, 3.0), Point::new(2.5, 3.49)],
        )
        .unwrap();
        assert_eq!(rows.at2(0, 0), (3 * 12 + 2) as f64);
        assert_eq!(rows.at2(1, 0), (3 * 12 + 3) as f64);
    }

    #[test]
    fn index_matches_scalar_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let featmap = Tensor::from_fn(&[3, 10, 12], |_| rng.gen_range(-1.0..1.0));
        let vertices: Vec<Point> = (0..20)
            .map(|_| Point::new(rng.gen_range(0.0..11.0), rng.gen_range(0.0..9.0)))
            .collect();
        let rows = index_at_vertices(&featmap, &vertices).unwrap();
        for (k, v) in vertices.iter().enumerate() {
            let px = (v.x + 0.5).floor() as usize;
            let py = (v.y + 0.5).floor() as usize;
            for c in 0..3 {
                assert_eq!(rows.at2(k, c), featmap.data[c * 120 + py * 12 + px]);
            }
        }
    }

    #[test]
    fn out_of_bounds_vertex_is_an_error() {
        let featmap = Tensor::zeros(&[1, 4, 4]);
        let err = index_at_vertices(&featmap, &[Point::new(3.6, 0.0)]).unwrap_err();
        assert!(matches!(err, EmbedError::OutOfBounds { index: 0, .. }));
    }

    #[test]
    fn normalization_maps_corners_to_unit_box() {
        let coords = normalized_coords(
            &[Point::new(0.0, 0.0), Point::new(719.0, 719.0)],
            720,
            720,
        )
        .unwrap();
        assert_eq!(coords.row(0), &[-1.0, -1.0]);
        assert_eq!(coords.row(1), &[1.0, 1.0]);
        assert!(matches!(
            normalized_coords(&[], 1, 5),
            Err(EmbedError::DegenerateCanvas { .. })
        ));
    }

    #[test]
    fn positional_embedding_matches_affine_oracle() {
        let params = small_params(5).embed;
        let vertices = vec![Point::new(3.3, 7.7)];
        let out = positional_embedding(&vertices, 12, 10, &params).unwrap();
        let coords = normalized_coords(&vertices, 12, 10).unwrap();
        let c = params.pos_mlp.l1.w.shape[0];
        for o in 0..c {
            // hidden = relu(W1·x + b1)
            let mut hidden = vec![0.0; c];
            for j in 0..c {
                let mut acc = params.pos_mlp.l1.b.data[j];
                for i in 0..2 {
                    acc += params.pos_mlp.l1.w.at2(j, i) * coords.data[i];
                }
                hidden[j] = acc.max(0.0);
            }
            let mut acc = params.pos_mlp.l2.b.data[o];
            for j in 0..c {
                acc += params.pos_mlp.l2.w.at2(o, j) * hidden[j];
            }
            assert!((out.at2(0, o) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn topo_embedding_of_single_vertex_feeds_zero_row() {
        let params = small_params(5).embed;
        let mut g = LineGraph::new(8, 8);
        g.vertices.push(Point::new(1.0, 1.0));
        let out = topological_embedding(&g, &params);
        // Spectral row is zero, so result is mlp2(0).
        let zero = Tensor::zeros(&[1, params.topo_mlp.l1.w.shape[1]]);
        let expect = {
            let h = tensor::map_unary(
                &tensor::affine(&zero, &params.topo_mlp.l1.w, &params.topo_mlp.l1.b),
                |v| v.max(0.0),
            );
            tensor::affine(&h, &params.topo_mlp.l2.w, &params.topo_mlp.l2.b)
        };
        assert_eq!(out, expect);
    }

    #[test]
    fn embed_sum_equals_component_sum() {
        let params = small_params(3);
        let g = test_graph();
        let img = test_image();
        let full = embed_vertices(&g, &img, &params.embed).unwrap();
        let ctx = index_at_vertices(&contextual_features(&img, &params.embed), &g.vertices).unwrap();
        let pos = positional_embedding(&g.vertices, g.width, g.height, &params.embed).unwrap();
        let topo = topological_embedding(&g, &params.embed);
        for i in 0..full.len() {
            let expect = ctx.data[i] + pos.data[i] + topo.data[i];
            assert!((full.data[i] - expect).abs() < 1e-12);
        }
        // Disabling two components leaves the third.
        let only_ctx = embed_vertices_ablated(
            &g,
            &img,
            &params.embed,
            EmbedToggles {
                contextual: true,
                positional: false,
                topological: false,
            },
        )
        .unwrap();
        assert_eq!(only_ctx, ctx);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let params = small_params(3);
        let g = test_graph();
        let img = RasterImage::blank(5, 5);
        assert!(matches!(
            embed_vertices(&g, &img, &params.embed),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn integer_translation_preserves_interior_context_lookups() {
        let params = small_params(11).embed;
        let mut g = LineGraph::new(24, 24);
        g.vertices.push(Point::new(8.0, 9.0));
        g.vertices.push(Point::new(12.0, 11.0));
        g.add_edge(0, 1).unwrap();
        let img = crate::geom::rasterize(&g, 2);
        let shifted_g = {
            let mut s = g.translated(5.0, 3.0);
            s.width = 24;
            s.height = 24;
            s
        };
        let shifted_img = crate::geom::rasterize(&shifted_g, 2);
        let a = index_at_vertices(&contextual_features(&img, &params), &g.vertices).unwrap();
        let b = index_at_vertices(
            &contextual_features(&shifted_img, &params),
            &shifted_g.vertices,
        )
        .unwrap();
        // Vertices sit >= 3 px (the conv receptive radius) from every border
        // in both frames, so the lookups agree bit-for-bit.
        assert_eq!(a, b);
    }
}
