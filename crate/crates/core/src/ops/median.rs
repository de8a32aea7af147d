use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::image::{reflect101, ImageBuffer};

/// Per-channel sliding-window median with reflect-101 borders.
pub fn median_filter(img: &ImageBuffer, kernel: usize) -> Result<ImageBuffer> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(param_err!("median kernel must be odd, got {kernel}"));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let r = (kernel / 2) as isize;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    let mut window: Vec<u8> = Vec::with_capacity(kernel * kernel);
    let mid = kernel * kernel / 2;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                window.clear();
                for dy in -r..=r {
                    let yy = reflect101(y as isize + dy, h);
                    for dx in -r..=r {
                        let xx = reflect101(x as isize + dx, w);
                        window.push(src[(yy * w + xx) * ch + c]);
                    }
                }
                let (_, m, _) = window.select_nth_unstable(mid);
                out.push(*m);
            }
        }
    }
    ImageBuffer::new(h, w, ch, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand_core::RngCore;

    #[test]
    fn constant_image_unchanged() {
        let img = ImageBuffer::filled(9, 7, 3, 77).unwrap();
        assert_eq!(median_filter(&img, 5).unwrap(), img);
    }

    #[test]
    fn center_of_one_to_nine() {
        let img = ImageBuffer::new(3, 3, 1, vec![9, 1, 8, 2, 7, 3, 6, 4, 5]).unwrap();
        assert_eq!(median_filter(&img, 3).unwrap().get(1, 1, 0), 5);
        assert!(median_filter(&img, 4).is_err());
    }

    #[test]
    fn matches_sort_and_pick_oracle() {
        let mut rng = crate::rng::stream(11);
        let data: Vec<u8> = (0..5 * 5 * 3).map(|_| rng.next_u32() as u8).collect();
        let img = ImageBuffer::new(5, 5, 3, data).unwrap();
        for k in [3usize, 5] {
            let out = median_filter(&img, k).unwrap();
            let r = (k / 2) as isize;
            for y in 0..5isize {
                for x in 0..5isize {
                    for c in 0..3 {
                        let mut v = Vec::new();
                        for dy in -r..=r {
                            for dx in -r..=r {
                                // Explicit mirror oracle.
                                let m = |i: isize| if i < 0 { -i } else if i > 4 { 8 - i } else { i };
                                v.push(img.get(m(y + dy) as usize, m(x + dx) as usize, c));
                            }
                        }
                        v.sort();
                        assert_eq!(out.get(y as usize, x as usize, c), v[v.len() / 2]);
                    }
                }
            }
        }
    }
}
