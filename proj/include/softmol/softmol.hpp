#pragma once

#include "softmol/chem.hpp"
#include "softmol/curate.hpp"
#include "softmol/decode.hpp"
#include "softmol/diffusion.hpp"
#include "softmol/error.hpp"
#include "softmol/fragment.hpp"
#include "softmol/metrics.hpp"
#include "softmol/oracle.hpp"
#include "softmol/rng.hpp"
#include "softmol/search.hpp"
#include "softmol/toy_corpus.hpp"
