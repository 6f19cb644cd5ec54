#include "personalize/image.hpp"

#include <cstdio>
#include <fstream>

namespace personalize {

namespace {

void write_binary(const std::filesystem::path& path, const std::string& header,
                  const std::vector<uint8_t>& payload) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("write failed: " + path.string());
}

// Reads a PNM token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        }
        c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

}  // namespace

uint8_t quantize8(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    return static_cast<uint8_t>(std::floor(v * 255.0 + 0.5));
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 3) throw ShapeError("write_ppm: expected 3 channels");
    std::string header = "P6\n" + std::to_string(image.width) + " " +
                         std::to_string(image.height) + "\n255\n";
    std::vector<uint8_t> bytes(static_cast<size_t>(image.height) * image.width * 3);
    size_t i = 0;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) bytes[i++] = quantize8(image.at(c, y, x));
    write_binary(path, header, bytes);
}

void write_pgm(const std::filesystem::path& path, const Image& gray) {
    if (gray.channels != 1) throw ShapeError("write_pgm: expected 1 channel");
    std::string header = "P5\n" + std::to_string(gray.width) + " " +
                         std::to_string(gray.height) + "\n255\n";
    std::vector<uint8_t> bytes(static_cast<size_t>(gray.height) * gray.width);
    size_t i = 0;
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x) bytes[i++] = quantize8(gray.at(0, y, x));
    write_binary(path, header, bytes);
}

void write_mask_pgm(const std::filesystem::path& path, const Mask& mask) {
    std::string header = "P5\n" + std::to_string(mask.width) + " " +
                         std::to_string(mask.height) + "\n255\n";
    std::vector<uint8_t> bytes(mask.values.size());
    for (size_t i = 0; i < mask.values.size(); ++i) bytes[i] = mask.values[i] ? 255 : 0;
    write_binary(path, header, bytes);
}

Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError("cannot open image: " + path.string());
    std::string magic = pnm_token(in);
    int channels = 0;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw ParseError("unsupported image format (want P5/P6): " + path.string());
    int width = 0, height = 0, maxval = 0;
    try {
        width = std::stoi(pnm_token(in));
        height = std::stoi(pnm_token(in));
        maxval = std::stoi(pnm_token(in));
    } catch (const std::exception&) {
        throw ParseError("malformed PNM header: " + path.string());
    }
    if (width <= 0 || height <= 0 || maxval != 255)
        throw ParseError("malformed PNM header: " + path.string());

    std::vector<uint8_t> bytes(static_cast<size_t>(width) * height * channels);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw ParseError("truncated PNM payload: " + path.string());

    Image im = Image::zeros(channels, height, width);
    size_t i = 0;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c) im.at(c, y, x) = bytes[i++] / 255.0;
    return im;
}

Mask read_mask(const std::filesystem::path& path) {
    Image gray = read_image(path);
    if (gray.channels != 1) throw ShapeError("mask must be single-channel: " + path.string());
    Mask m = Mask::zeros(gray.height, gray.width);
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x) {
            double v = gray.at(0, y, x);
            if (v == 0.0)
                m.at(y, x) = 0;
            else if (v == 1.0)
                m.at(y, x) = 1;
            else
                throw DataError("mask is not binary (pixel " + std::to_string(y) + "," +
                                std::to_string(x) + "): " + path.string());
        }
    return m;
}

Image average_pool(const Image& image, int out_h, int out_w) {
    Image out = Image::zeros(image.channels, out_h, out_w);
    for (int c = 0; c < image.channels; ++c)
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox) {
                int y0 = oy * image.height / out_h;
                int y1 = (oy + 1) * image.height / out_h;
                int x0 = ox * image.width / out_w;
                int x1 = (ox + 1) * image.width / out_w;
                if (y1 <= y0) y1 = y0 + 1;
                if (x1 <= x0) x1 = x0 + 1;
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) acc += image.at(c, y, x);
                out.at(c, oy, ox) = acc / ((y1 - y0) * (x1 - x0));
            }
    return out;
}

}  // namespace personalize
