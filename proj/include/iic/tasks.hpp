#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iic/image.hpp"
#include "iic/pipeline.hpp"

// Toy-scale task samples: frame sequences, dual-view (zoom) pairs, and
// hiding several unrelated images in one. A manifest file groups PNGs from a
// flat directory into samples, one line per sample:
//   sequence <file>... (odd count; reference = middle frame)
//   dual_view <file> <zoom>
//   hiding <file>...

namespace iic {

enum class TaskKind { sequence, dual_view, hiding };

struct TaskSample {
  ImageStack stack;
  TaskKind kind = TaskKind::hiding;
  int zoom = 1;       // dual_view only
  int time_step = 1;  // sequence only
};

// picks K frames at the given stride; the middle one is the reference
inline TaskSample make_sequence_sample(const std::vector<Tensor>& frames, int k,
                                       int step) {
  if (k < 1 || k % 2 == 0)
    throw std::invalid_argument("sequence samples need an odd frame count");
  if (step < 1) throw std::invalid_argument("time step must be positive");
  const int needed = (k - 1) * step + 1;
  if (static_cast<int>(frames.size()) < needed)
    throw std::invalid_argument("not enough frames: need " + std::to_string(needed));
  TaskSample s;
  s.kind = TaskKind::sequence;
  s.time_step = step;
  for (int i = 0; i < k; ++i) s.stack.images.push_back(frames[i * step]);
  s.stack.reference_index = k / 2;
  return s;
}

// [normal view, zoomed view]: zoomed = centered 1/s crop upsampled back to
// full size; the normal view is the reference
inline TaskSample make_dualview_sample(const Tensor& img, int zoom) {
  if (zoom != 1 && zoom != 2 && zoom != 4 && zoom != 8)
    throw std::invalid_argument("zoom factor must be 1, 2, 4, or 8");
  if (img.ndim() != 3) throw std::invalid_argument("dual_view expects [C,H,W]");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int ch = h / zoom, cw = w / zoom;
  if (ch < 1 || cw < 1) throw std::invalid_argument("image too small for zoom");
  const int y0 = (h - ch) / 2, x0 = (w - cw) / 2;

  Tensor crop = Tensor::zeros({c, ch, cw});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        crop.data()[(static_cast<size_t>(ci) * ch + y) * cw + x] =
            img.data()[(static_cast<size_t>(ci) * h + y0 + y) * w + x0 + x];

  TaskSample s;
  s.kind = TaskKind::dual_view;
  s.zoom = zoom;
  s.stack.images = {img.detach(), zoom == 1 ? crop : bilinear_resize(crop, h, w)};
  s.stack.reference_index = 0;
  return s;
}

// K >= 2 unrelated same-shape images; the first is the reference
inline TaskSample make_hiding_sample(const std::vector<Tensor>& images) {
  if (images.size() < 2)
    throw std::invalid_argument("hiding samples need at least two images");
  for (const auto& img : images)
    if (img.shape() != images.front().shape())
      throw std::invalid_argument("hiding samples need equal image shapes");
  TaskSample s;
  s.kind = TaskKind::hiding;
  for (const auto& img : images) s.stack.images.push_back(img.detach());
  s.stack.reference_index = 0;
  return s;
}

// ---- manifest ---------------------------------------------------------------

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// parses the manifest and loads the referenced PNGs from the same directory;
// blank lines and '#' comments are skipped
inline std::vector<TaskSample> load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ManifestError("cannot open manifest: " + manifest_path);
  const auto slash = manifest_path.find_last_of('/');
  const std::string dir =
      slash == std::string::npos ? "" : manifest_path.substr(0, slash + 1);

  std::vector<TaskSample> samples;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind) || kind[0] == '#') continue;
    const auto where = [&] {
      return " (manifest line " + std::to_string(lineno) + ")";
    };
    try {
      if (kind == "sequence" || kind == "hiding") {
        std::vector<Tensor> images;
        std::string name;
        while (ls >> name) images.push_back(png_read(dir + name));
        samples.push_back(kind == "sequence"
                              ? make_sequence_sample(images,
                                                     static_cast<int>(images.size()), 1)
                              : make_hiding_sample(images));
      } else if (kind == "dual_view") {
        std::string name;
        int zoom;
        if (!(ls >> name >> zoom))
          throw ManifestError("dual_view needs a file name and zoom factor");
        samples.push_back(make_dualview_sample(png_read(dir + name), zoom));
      } else {
        throw ManifestError("unknown task kind '" + kind + "'");
      }
    } catch (const ManifestError& e) {
      throw ManifestError(e.what() + where());
    } catch (const std::exception& e) {
      throw ManifestError(std::string(e.what()) + where());
    }
  }
  return samples;
}

} // namespace iic
