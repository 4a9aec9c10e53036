#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcap/episodes.hpp"
#include "dcap/errors.hpp"

namespace fs = std::filesystem;

namespace dcap {

void write_pnm(const std::string& path, const RasterImage& img, std::string_view comment) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pnm: 1 or 3 channels supported");
  if (img.pixels.size() != img.width * img.height * img.channels) throw std::invalid_argument("write_pnm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError(path, "cannot open for writing");
  out << (img.channels == 1 ? "P5\n" : "P6\n");
  if (!comment.empty()) out << "# " << comment << "\n";
  out << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IngestError(path, "write failed");
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IngestError(path, "truncated header");
  return tok;
}

std::size_t header_number(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = next_token(in, path);
  std::size_t v = 0;
  try {
    std::size_t used = 0;
    v = std::stoul(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
  } catch (const std::exception&) {
    throw IngestError(path, std::string("bad ") + what + " '" + tok + "'");
  }
  return v;
}

}  // namespace

RasterImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path, "cannot open");
  const std::string magic = next_token(in, path);
  RasterImage img;
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw IngestError(path, "not a binary PGM/PPM (magic '" + magic + "')");
  img.width = header_number(in, path, "width");
  img.height = header_number(in, path, "height");
  const std::size_t maxval = header_number(in, path, "maxval");
  if (img.width == 0 || img.height == 0) throw IngestError(path, "empty image");
  if (maxval != 255) throw IngestError(path, "only 8-bit images (maxval 255) are supported");
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IngestError(path, "truncated pixel data");
  return img;
}

void export_image_dir(const Dataset& ds, const std::string& root) {
  const std::size_t e = ds.extent(), ch = ds.channels(), plane = e * e;
  for (std::size_t c = 0; c < ds.class_count(); ++c) {
    const ClassInfo& info = ds.class_info(c);
    const fs::path dir = fs::path(root) / std::string(to_string(info.split)) / info.name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IngestError(dir.string(), "cannot create directory: " + ec.message());
    for (std::size_t k = 0; k < info.images.size(); ++k) {
      RasterImage img{e, e, ch, {}};
      img.pixels.resize(plane * ch);
      const auto src = ds.image(info.images[k]);
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t q = 0; q < ch; ++q) img.pixels[p * ch + q] = src[q * plane + p];
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.%s", k, ch == 1 ? "pgm" : "ppm");
      write_pnm((dir / name).string(), img);
    }
  }
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool want_dirs) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
    const bool is_dir = it->is_directory();
    if (is_dir == want_dirs && it->path().filename().string().front() != '.') out.push_back(it->path());
  }
  if (ec) throw IngestError(dir.string(), "cannot list directory: " + ec.message());
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  return out;
}

}  // namespace

Dataset load_image_dir(const std::string& root) {
  const fs::path base(root);
  if (!fs::is_directory(base)) throw IngestError(root, "not a directory");
  for (const fs::path& d : sorted_entries(base, true)) {
    const std::string name = d.filename().string();
    bool known = false;
    for (Split s : kAllSplits) known = known || to_string(s) == name;
    if (!known) throw IngestError(d.string(), "unexpected split directory (expected meta-train, meta-val, meta-test)");
  }
  Dataset ds;
  bool have_extent = false;
  for (Split s : kAllSplits) {
    const fs::path sdir = base / std::string(to_string(s));
    if (!fs::exists(sdir)) continue;
    for (const fs::path& cdir : sorted_entries(sdir, true)) {
      const std::vector<fs::path> files = sorted_entries(cdir, false);
      if (files.empty()) throw IngestError(cdir.string(), "class '" + cdir.filename().string() + "' has no images");
      std::vector<RasterImage> imgs;
      for (const fs::path& f : files) {
        RasterImage img = read_pnm(f.string());
        if (img.width != img.height) throw IngestError(f.string(), "image is not square");
        if (!have_extent) {
          ds = Dataset(img.channels, img.width);
          have_extent = true;
        } else if (img.width != ds.extent() || img.channels != ds.channels()) {
          throw IngestError(f.string(), "extent " + std::to_string(img.width) + "x" + std::to_string(img.channels) +
                                            " differs from dataset extent " + std::to_string(ds.extent()) + "x" +
                                            std::to_string(ds.channels()));
        }
        imgs.push_back(std::move(img));
      }
      const std::size_t cls = ds.add_class(cdir.filename().string(), s);
      const std::size_t ch = ds.channels(), plane = ds.extent() * ds.extent();
      std::vector<std::uint8_t> planar(plane * ch);
      for (const RasterImage& img : imgs) {
        for (std::size_t p = 0; p < plane; ++p)
          for (std::size_t q = 0; q < ch; ++q) planar[q * plane + p] = img.pixels[p * ch + q];
        ds.add_image(cls, planar);
      }
    }
  }
  if (!have_extent) throw IngestError(root, "no images found");
  ds.validate();
  return ds;
}

}  // namespace dcap
