#pragma once

// Umbrella header for the corpus-poisoning workbench.

#include "jointgcg/core.hpp"
#include "jointgcg/tokenizers.hpp"
#include "jointgcg/model_io.hpp"
#include "jointgcg/models.hpp"
#include "jointgcg/cvp.hpp"
#include "jointgcg/gta.hpp"
#include "jointgcg/awf.hpp"
#include "jointgcg/rag_env.hpp"
#include "jointgcg/defenses.hpp"
#include "jointgcg/attack.hpp"
#include "jointgcg/toy_suite.hpp"
#include "jointgcg/experiments.hpp"
