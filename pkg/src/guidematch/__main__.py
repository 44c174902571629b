from guidematch.cli import main

main()
