#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vstory/corpus.hpp"

namespace vstory::testing {

// Story assembled from explicit scenes, without going through the generator.
inline VisualStory story_from_scenes(const std::string& id, const std::vector<SceneSpec>& scenes) {
  VisualStory s;
  s.id = id;
  std::vector<std::string> sentences;
  for (const auto& scene : scenes) {
    s.frames.push_back(render_frame(scene));
    s.captions.push_back(caption_for(scene));
    sentences.push_back(narrative_sentence(scene));
    for (const auto& e : scene.entities) s.entities.push_back(e);
    s.actions.push_back(scene.action);
    s.emotions.push_back(scene.emotion);
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) s.narrative += (i ? " " : "") + sentences[i];
  std::sort(s.entities.begin(), s.entities.end());
  s.entities.erase(std::unique(s.entities.begin(), s.entities.end()), s.entities.end());
  std::sort(s.emotions.begin(), s.emotions.end());
  s.emotions.erase(std::unique(s.emotions.begin(), s.emotions.end()), s.emotions.end());
  return s;
}

inline SceneSpec scene(std::vector<std::string> entities, std::string action, std::string emotion,
                       std::string background = "forest", std::uint64_t layout = 1) {
  return SceneSpec{std::move(entities), std::move(action), std::move(emotion), std::move(background), layout};
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vstory_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace vstory::testing
