/* Exercises the C interface from C. */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

#include "deauville/deauville.h"

static int failures = 0;

#define EXPECT(cond)                                                       \
    do {                                                                   \
        if (!(cond)) {                                                     \
            fprintf(stderr, "%s:%d: failed: %s (%s)\n", __FILE__, __LINE__, #cond, \
                    dv_last_error());                                      \
            ++failures;                                                    \
        }                                                                  \
    } while (0)

static void write_file(const char* path, const char* text)
{
    FILE* f = fopen(path, "w");
    if (!f) {
        perror(path);
        exit(2);
    }
    fputs(text, f);
    fclose(f);
}

int main(void)
{
    char dir[256];
    char path[1024];
    char corpus[512];
    snprintf(dir, sizeof dir, "/tmp/deauville_capi_%d", (int)getpid());
    snprintf(path, sizeof path, "rm -rf %s && mkdir -p %s", dir, dir);
    if (system(path) != 0) return 2;

    EXPECT(strlen(dv_version()) > 0);
    EXPECT(strstr(dv_stage_names(), "corpus") == dv_stage_names());

    dv_grammar* grammar = NULL;
    EXPECT(dv_grammar_load(NULL, &grammar) == DV_OK);
    int label = -1;
    size_t mentions = 0;
    EXPECT(dv_grammar_label(grammar, "Overall Deauville score 4. Second site Deauville 2.", &label, &mentions) == DV_OK);
    EXPECT(label == 4);
    EXPECT(mentions == 2);
    EXPECT(dv_grammar_label(grammar, "No score given.", &label, &mentions) == DV_OK);
    EXPECT(label == 0 && mentions == 0);
    char* redacted = NULL;
    EXPECT(dv_grammar_redact(grammar, "Deauville 5 in the spleen.", &redacted) == DV_OK);
    EXPECT(redacted && strstr(redacted, "5") == NULL);
    dv_string_free(redacted);
    EXPECT(dv_grammar_label(grammar, NULL, &label, &mentions) == DV_ERR_VALIDATION);
    EXPECT(strlen(dv_last_error()) > 0);
    dv_grammar_free(grammar);

    snprintf(path, sizeof path, "%s/missing.yaml", dir);
    grammar = NULL;
    EXPECT(dv_grammar_load(path, &grammar) != DV_OK);
    EXPECT(grammar == NULL);

    double counts[25] = {0};
    double kappa = 0.0;
    for (int i = 0; i < 5; ++i) counts[i * 5 + i] = i + 1;
    EXPECT(dv_weighted_kappa(counts, 5, DV_WEIGHT_LINEAR, &kappa) == DV_OK);
    EXPECT(kappa == 1.0);
    counts[1] = 2.0;
    EXPECT(dv_weighted_kappa(counts, 5, DV_WEIGHT_QUADRATIC, &kappa) == DV_OK);
    EXPECT(kappa < 1.0 && kappa > 0.0);
    double single[4] = {3, 0, 0, 0};
    EXPECT(dv_weighted_kappa(single, 2, DV_WEIGHT_LINEAR, &kappa) == DV_ERR_VALIDATION);

    snprintf(path, sizeof path, "%s/spec.yaml", dir);
    write_file(path, "n_exams: 25\nseed: 4\nwith_images: false\nunscored_fraction: 0.2\n");
    snprintf(corpus, sizeof corpus, "%s/corpus", dir);
    EXPECT(dv_corpus_generate(path, corpus) == DV_OK);
    char* stats = NULL;
    EXPECT(dv_corpus_stats(corpus, &stats) == DV_OK);
    EXPECT(stats && strstr(stats, "\"total\": 25") != NULL);
    dv_string_free(stats);

    snprintf(path, sizeof path, "%s/labels.csv", dir);
    EXPECT(dv_extract_labels(corpus, NULL, path) == DV_OK);
    EXPECT(access(path, R_OK) == 0);

    EXPECT(dv_corpus_stats("/nonexistent/corpus", &stats) == DV_ERR_IO || stats == NULL);
    EXPECT(dv_resume(dir, NULL) == DV_ERR_UNRECOVERABLE);

    dv_experiment* experiment = NULL;
    snprintf(path, sizeof path, "%s/missing.cfg", dir);
    EXPECT(dv_experiment_load(path, &experiment) == DV_ERR_VALIDATION);

    snprintf(path, sizeof path, "rm -rf %s", dir);
    if (system(path) != 0) ++failures;
    if (failures == 0) printf("test_capi: all checks passed\n");
    return failures == 0 ? 0 : 1;
}
